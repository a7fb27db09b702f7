"""Segmentation agreement across RR samples: Dice and voxel entropy."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "LabelVolume",
    "dice",
    "entropy_map",
    "mask_to_superclass",
    "min_pairwise_dice",
]


@dataclass
class LabelVolume:
    """Categorical volume: integer region ids plus an id -> name table."""

    labels: np.ndarray
    region_table: dict[int, str] = field(default_factory=dict)
    voxel_size: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError(f"labels must be integers, got {labels.dtype}")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        self.labels = labels.astype(np.uint16, copy=False) if labels.size == 0 or labels.max() < 2**16 else labels
        self.region_table = {int(k): str(v) for k, v in self.region_table.items()}
        if not self.region_table:
            self.region_table = {int(i): f"region_{int(i)}" for i in np.unique(self.labels)}
        unknown = set(np.unique(self.labels).tolist()) - set(self.region_table)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} missing from region table")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    @property
    def regions(self) -> list[int]:
        return sorted(self.region_table)


def _labels(v) -> np.ndarray:
    return v.labels if isinstance(v, LabelVolume) else np.asarray(v)


def dice(a, b, region: int) -> float:
    """Sørensen-Dice of the masks ``a == region`` and ``b == region``.

    Two empty masks agree perfectly and score 1.0.
    """
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"shape mismatch: {la.shape} vs {lb.shape}")
    ma, mb = la == region, lb == region
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def min_pairwise_dice(vols: Sequence, region: int) -> float:
    """Worst Dice over all unordered pairs of samples."""
    if len(vols) < 2:
        raise ValueError(f"need at least 2 volumes, got {len(vols)}")
    return min(dice(a, b, region) for a, b in itertools.combinations(vols, 2))


def entropy_map(vols: Sequence, regions: Sequence[int]) -> np.ndarray:
    """Per-voxel ``-sum_i p_i ln p_i`` of region frequencies across samples.

    ``p_i`` is the fraction of samples labelling the voxel with region ``i``;
    ``0 ln 0 = 0``.
    """
    if len(vols) < 2:
        raise ValueError(f"need at least 2 volumes, got {len(vols)}")
    stack = np.stack([_labels(v) for v in vols])
    if len({_labels(v).shape for v in vols}) != 1:
        raise ValueError("label volumes differ in shape")
    regions = list(regions)
    known = np.isin(stack, regions)
    if not known.all():
        idx = np.argwhere(~known)[0]
        label = int(stack[tuple(idx)])
        raise ValueError(f"unknown label {label} at voxel {tuple(int(i) for i in idx[1:])} "
                         f"of sample {int(idx[0])}")
    n = stack.shape[0]
    ent = np.zeros(stack.shape[1:], dtype=np.float64)
    for r in regions:
        counts = (stack == r).sum(axis=0)
        p = counts / n
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(counts > 0, p * np.log(np.where(counts > 0, p, 1.0)), 0.0)
        ent -= term
    # unanimous voxels are exactly zero; -0.0 would print oddly
    ent[ent == 0] = 0.0
    return ent


def mask_to_superclass(v: LabelVolume, mapping: Mapping[int, int],
                       names: Mapping[int, str] | None = None) -> LabelVolume:
    """Relabel ``v`` through ``mapping``; every present label needs an entry.

    New region names come from ``names``, else from the first source region
    mapped onto each target id.
    """
    present = [int(i) for i in np.unique(v.labels)]
    missing = [i for i in present if i not in mapping]
    if missing:
        raise KeyError(f"no superclass mapping for labels {missing}")
    lut_size = max(max(present, default=0), max(mapping, default=0)) + 1
    lut = np.zeros(lut_size, dtype=np.int64)
    for src, dst in mapping.items():
        lut[int(src)] = int(dst)
    relabeled = lut[v.labels]
    table: dict[int, str] = {}
    for src in sorted(v.region_table):
        if src not in mapping:
            continue
        dst = int(mapping[src])
        if names is not None and dst in names:
            table[dst] = names[dst]
        else:
            table.setdefault(dst, v.region_table[src])
    return LabelVolume(relabeled, table, v.voxel_size)


def entropy_bound(r: int, n: int) -> float:
    return math.log(min(r, n))
