import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rrprobe.segmetrics import (LabelVolume, dice, entropy_bound, entropy_map, mask_to_superclass,
                                min_pairwise_dice)

label_arrays = hnp.arrays(np.uint16, (4, 5), elements=st.integers(0, 3))


def test_dice_examples():
    a = np.array([1, 1, 0, 0])
    b = np.array([1, 0, 1, 0])
    assert dice(a, a, 1) == 1.0
    assert dice(a, 1 - a, 1) == 0.0
    assert dice(a, b, 1) == 0.5  # 2*1 / (2 + 2)
    assert dice(a, b, 7) == 1.0  # both empty


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        dice(np.zeros(3), np.zeros(4), 0)


@given(label_arrays, label_arrays, st.integers(0, 3))
def test_dice_symmetric_and_bounded(a, b, r):
    d = dice(a, b, r)
    assert d == dice(b, a, r)
    assert 0.0 <= d <= 1.0


def test_min_pairwise_dice():
    a = np.array([1, 1, 1, 1])
    b = np.array([1, 1, 1, 0])
    c = np.array([1, 0, 0, 0])
    assert min_pairwise_dice([a, b, c], 1) == 2 * 1 / (4 + 1)
    with pytest.raises(ValueError, match="at least 2"):
        min_pairwise_dice([a], 1)


def test_entropy_unanimous_is_zero():
    v = np.array([[0, 1], [2, 1]])
    ent = entropy_map([v] * 5, [0, 1, 2])
    assert np.array_equal(ent, np.zeros((2, 2)))
    assert not np.signbit(ent).any()


@pytest.mark.parametrize("n", [2, 3, 5])
def test_entropy_all_distinct_is_log_n(n):
    vols = [np.full((2, 3), i) for i in range(n)]
    ent = entropy_map(vols, range(n))
    assert np.allclose(ent, math.log(n), atol=1e-12, rtol=0)
    assert ent.max() <= entropy_bound(n, n) + 1e-12


def test_entropy_two_to_one_split():
    vols = [np.array([1]), np.array([1]), np.array([2])]
    p = np.array([2 / 3, 1 / 3])
    assert entropy_map(vols, [1, 2])[0] == pytest.approx(-(p * np.log(p)).sum(), abs=1e-15)


def test_entropy_unknown_label_reports_location():
    vols = [np.array([[0, 1]]), np.array([[0, 9]])]
    with pytest.raises(ValueError, match=r"unknown label 9 at voxel \(0, 1\) of sample 1"):
        entropy_map(vols, [0, 1])


def test_entropy_accepts_label_volumes():
    vols = [LabelVolume(np.array([0, 1])), LabelVolume(np.array([0, 0]))]
    ent = entropy_map(vols, [0, 1])
    assert ent[0] == 0.0 and ent[1] == pytest.approx(math.log(2))


def test_label_volume_validation():
    with pytest.raises(TypeError):
        LabelVolume(np.array([0.5]))
    with pytest.raises(ValueError, match="non-negative"):
        LabelVolume(np.array([-1, 0]))
    with pytest.raises(ValueError, match="missing from region table"):
        LabelVolume(np.array([0, 3]), {0: "bg"})
    v = LabelVolume(np.array([0, 2]))
    assert v.region_table == {0: "region_0", 2: "region_2"}
    assert v.labels.dtype == np.uint16 and v.regions == [0, 2]


def test_mask_to_superclass():
    v = LabelVolume(np.array([0, 3, 4, 5]), {0: "bg", 3: "ctx_a", 4: "ctx_b", 5: "wm"})
    sup = mask_to_superclass(v, {0: 0, 3: 1, 4: 1, 5: 2}, names={1: "cortex"})
    assert sup.labels.tolist() == [0, 1, 1, 2]
    assert sup.region_table == {0: "bg", 1: "cortex", 2: "wm"}
    with pytest.raises(KeyError, match=r"\[5\]"):
        mask_to_superclass(v, {0: 0, 3: 1, 4: 1})


def test_entropy_bound():
    assert entropy_bound(35, 5) == pytest.approx(math.log(5))
    assert entropy_bound(2, 5) == pytest.approx(math.log(2))
