import math

import mpmath
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rrprobe.stats import (DegenerateError, betainc, bonferroni, paired_t_test, student_t_cdf,
                           student_t_two_sided_p)


def t_tail_oracle(t: float, dof: int) -> float:
    """Two-sided tail by quadrature of the Student density at 30 digits."""
    with mpmath.workdps(30):
        nu = mpmath.mpf(dof)
        c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
        density = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)  # noqa: E731
        return float(2 * mpmath.quad(density, [abs(t), mpmath.inf]))


def test_textbook_example():
    res = paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert res.t == pytest.approx(3 / math.sqrt(2.5 / 5), abs=1e-12)
    assert res.t == pytest.approx(4.2426, abs=1e-4)
    assert res.dof == 4
    assert res.p_value == pytest.approx(t_tail_oracle(res.t, 4), abs=1e-12)
    assert res.p_value == pytest.approx(0.0132, abs=1e-3)


@given(st.floats(-30, 30), st.integers(1, 60))
def test_two_sided_p_matches_quadrature(t, dof):
    assert student_t_two_sided_p(t, dof) == pytest.approx(t_tail_oracle(t, dof), abs=1e-11)


@given(st.floats(0.1, 50), st.floats(0.1, 50), st.floats(0, 1))
def test_betainc_matches_mpmath(a, b, x):
    want = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert betainc(a, b, x) == pytest.approx(want, abs=1e-11)


def test_betainc_domain():
    assert betainc(2, 3, 0.0) == 0.0 and betainc(2, 3, 1.0) == 1.0
    with pytest.raises(ValueError):
        betainc(0, 1, 0.5)
    with pytest.raises(ValueError):
        betainc(1, 1, 1.5)


def test_cdf_symmetry():
    assert student_t_cdf(0.0, 5) == pytest.approx(0.5)
    assert student_t_cdf(2.0, 5) + student_t_cdf(-2.0, 5) == pytest.approx(1.0, abs=1e-14)
    assert student_t_two_sided_p(math.inf, 3) == 0.0


def test_degenerate_and_invalid_inputs():
    with pytest.raises(DegenerateError, match="degenerate"):
        paired_t_test([1, 2, 3], [1, 2, 3])
    with pytest.raises(DegenerateError):
        paired_t_test([2, 3, 4], [1, 2, 3])  # constant shift
    with pytest.raises(ValueError, match="length"):
        paired_t_test([1, 2], [1])
    with pytest.raises(ValueError, match="at least 2"):
        paired_t_test([1], [2])
    with pytest.raises(ValueError, match="NaN"):
        paired_t_test([1, math.nan], [0, 0])


def test_sign_of_t():
    assert paired_t_test([0, 0, 0], [1, 2, 4]).t < 0


def test_bonferroni():
    assert bonferroni([0.01, 0.2, 0.6], 3) == pytest.approx([0.03, 0.6, 1.0])
    assert bonferroni([0.5], 35) == [1.0]
    with pytest.raises(ValueError):
        bonferroni([0.1], 0)
