"""Significant-bit estimation across Random Rounding samples."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "SampleSet",
    "bit_significance",
    "mantissa_bits_for",
    "mean_sigbits",
    "significant_bits",
]

MANTISSA_SIZES = (24, 53)


def mantissa_bits_for(t: int) -> int:
    """Mantissa size paired with virtual precision ``t`` (24 or 53)."""
    return 24 if t <= 24 else 53


@dataclass(frozen=True)
class SampleSet:
    """``n`` RR result arrays and the IEEE reference, aligned element-wise.

    ``samples`` has shape ``(n, *reference.shape)``.
    """

    samples: np.ndarray
    reference: np.ndarray
    m: int = 53

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        reference = np.asarray(self.reference, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "reference", reference)
        if samples.ndim < 1 or samples.shape[0] < 2:
            raise ValueError(f"need at least 2 samples, got shape {samples.shape}")
        if samples.shape[1:] != reference.shape:
            raise ValueError(
                f"shape mismatch: samples {samples.shape[1:]} vs reference {reference.shape}")
        if self.m not in MANTISSA_SIZES:
            raise ValueError(f"m must be one of {MANTISSA_SIZES}, got {self.m}")

    @classmethod
    def from_arrays(cls, samples: Sequence[np.ndarray], reference: np.ndarray,
                    m: int = 53) -> "SampleSet":
        shapes = {np.shape(s) for s in samples}
        if len(shapes) > 1:
            raise ValueError(f"samples have differing shapes: {sorted(shapes)}")
        return cls(np.stack([np.asarray(s, dtype=np.float64) for s in samples]), reference, m)

    @property
    def n(self) -> int:
        return self.samples.shape[0]


def bit_significance(z, k: int):
    """True where bit ``k`` is significant, i.e. ``|z| < 2**-k``."""
    return np.abs(z) < 2.0 ** -k


def significant_bits(s: SampleSet, mode: str = "absolute") -> np.ndarray:
    """Largest ``k`` in ``[1, m]`` with ``|X_i - x_IEEE| < 2**-k`` for every sample.

    Returns an integer array shaped like the reference. Voxels where every
    sample equals the reference get ``m``; voxels where even ``k = 1`` fails,
    or where any sample or the reference is NaN, get 0.

    ``mode="relative"`` divides the deviation by ``|x_IEEE|`` (falling back
    to the absolute deviation where the reference is zero).
    """
    if mode not in ("absolute", "relative"):
        raise ValueError(f"mode must be 'absolute' or 'relative', got {mode!r}")
    with np.errstate(invalid="ignore", over="ignore"):
        z = np.abs(s.samples - s.reference[None])
        worst = z.max(axis=0)
        if mode == "relative":
            ref = np.abs(s.reference)
            worst = np.where(ref > 0, worst / np.where(ref > 0, ref, 1.0), worst)
    nan = np.isnan(z).any(axis=0) | np.isnan(worst)
    # |d| < 2**-k  <=>  k <= -e, where d = f * 2**e with f in [0.5, 1)
    _, e = np.frexp(np.where(np.isfinite(worst), worst, 1.0))
    bits = np.clip(-e, 0, s.m)
    bits = np.where(worst == 0, s.m, bits)
    bits = np.where(np.isinf(worst) | nan, 0, bits)
    return bits.astype(np.int64)


def mean_sigbits(sigbits: np.ndarray, mask=None) -> float:
    """Mean over in-mask voxels.

    ``mask`` is a boolean array, or a label volume whose nonzero labels are
    in the mask. For warp fields, pass the ``(components, *spatial)`` map:
    components share one grid, so the grand mean equals the voxelwise mean
    of the per-voxel component average.
    """
    values = np.asarray(sigbits, dtype=np.float64)
    if mask is None:
        if values.size == 0:
            raise ValueError("empty map")
        return float(values.mean())
    labels = getattr(mask, "labels", mask)
    mask_arr = np.asarray(labels) != 0 if np.asarray(labels).dtype != bool else np.asarray(labels)
    spatial = values.shape[-mask_arr.ndim:] if mask_arr.ndim else ()
    if spatial != mask_arr.shape:
        raise ValueError(f"mask shape {mask_arr.shape} does not match map shape {values.shape}")
    if not mask_arr.any():
        raise ValueError("empty mask")
    return float(values[..., mask_arr].mean())
