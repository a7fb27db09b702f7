"""Raw little-endian volumes with JSON sidecars, CSV tables, synthetic subjects.

A volume ``name`` is stored as ``name.raw`` (C-order, little-endian) next to
``name.json``::

    {"shape": [32, 32, 32], "dtype": "f64", "voxel_size": [1.0, 1.0, 1.0],
     "kind": "image"}

Label volumes (``kind="labels"``, always ``u16``) also carry
``"region_table": {"0": "background", ...}``.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .segmetrics import LabelVolume

__all__ = [
    "DTYPES",
    "DtypeError",
    "HeaderError",
    "KINDS",
    "LengthMismatchError",
    "VolumeError",
    "VolumeHeader",
    "make_atlas",
    "read_csv",
    "read_volume",
    "synth_subject",
    "write_csv",
    "write_volume",
]

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u16": np.dtype("<u2")}
KINDS = ("image", "warp", "labels", "sigbits", "entropy")


class VolumeError(ValueError):
    pass


class LengthMismatchError(VolumeError):
    pass


class DtypeError(VolumeError):
    pass


class HeaderError(VolumeError):
    pass


@dataclass
class VolumeHeader:
    shape: tuple[int, ...]
    dtype: str = "f64"
    voxel_size: tuple[float, ...] | None = None
    kind: str = "image"
    region_table: dict[int, str] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.shape = tuple(int(n) for n in self.shape)
        if not self.shape or any(n <= 0 for n in self.shape):
            raise HeaderError(f"shape must be positive, got {self.shape}")
        if self.dtype not in DTYPES:
            raise DtypeError(f"unknown dtype {self.dtype!r}; expected one of {sorted(DTYPES)}")
        if self.kind not in KINDS:
            raise HeaderError(f"unknown kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "labels" and self.dtype != "u16":
            raise DtypeError(f"labels must be stored as u16, got {self.dtype}")
        if self.voxel_size is None:
            spatial = self.shape[1:] if self.kind == "warp" else self.shape
            self.voxel_size = (1.0,) * len(spatial)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * DTYPES[self.dtype].itemsize

    def to_dict(self) -> dict:
        d = {"shape": list(self.shape), "dtype": self.dtype,
             "voxel_size": list(self.voxel_size), "kind": self.kind}
        if self.region_table is not None:
            d["region_table"] = {str(k): v for k, v in sorted(self.region_table.items())}
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeHeader":
        try:
            table = d.get("region_table")
            return cls(
                shape=tuple(d["shape"]),
                dtype=d["dtype"],
                voxel_size=tuple(d["voxel_size"]) if d.get("voxel_size") is not None else None,
                kind=d.get("kind", "image"),
                region_table={int(k): str(v) for k, v in table.items()} if table is not None else None,
                extra=d.get("extra", {}),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise HeaderError(f"malformed header: {exc!r}") from None


def _stem(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".raw", ".json") else p


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(header: VolumeHeader, data, path: str | os.PathLike) -> Path:
    """Write ``data`` as ``<path>.raw`` + ``<path>.json``; returns the stem."""
    stem = _stem(path)
    if isinstance(data, LabelVolume):
        if header.region_table is None:
            header.region_table = dict(data.region_table)
        data = data.labels
    arr = np.asarray(data)
    if arr.shape != header.shape:
        raise VolumeError(f"data shape {arr.shape} does not match header {header.shape}")
    dt = DTYPES[header.dtype]
    if header.dtype == "u16":
        if not np.issubdtype(arr.dtype, np.integer) or (arr.size and (arr.min() < 0 or arr.max() > 65535)):
            raise DtypeError("u16 volume needs integer data in [0, 65535]")
    elif not np.issubdtype(arr.dtype, np.number):
        raise DtypeError(f"cannot store {arr.dtype} as {header.dtype}")
    blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
    _atomic_write(stem.with_name(stem.name + ".raw"), blob)
    text = json.dumps(header.to_dict(), indent=2, sort_keys=True) + "\n"
    _atomic_write(stem.with_name(stem.name + ".json"), text.encode())
    return stem


def read_header(path: str | os.PathLike) -> VolumeHeader:
    stem = _stem(path)
    try:
        meta = json.loads(stem.with_name(stem.name + ".json").read_text())
    except json.JSONDecodeError as exc:
        raise HeaderError(f"malformed JSON sidecar for {stem}: {exc}") from None
    if not isinstance(meta, dict):
        raise HeaderError(f"sidecar for {stem} is not a JSON object")
    return VolumeHeader.from_dict(meta)


def read_volume(path: str | os.PathLike, dtype: str | None = None):
    """Read a volume; returns ``(header, ndarray | LabelVolume)``.

    ``dtype`` states the expected on-disk type; a different stored type is a
    :class:`DtypeError`, never a silent cast.
    """
    stem = _stem(path)
    header = read_header(stem)
    if dtype is not None and dtype != header.dtype:
        raise DtypeError(f"{stem} holds {header.dtype}, requested {dtype}")
    blob = stem.with_name(stem.name + ".raw").read_bytes()
    if len(blob) != header.nbytes:
        raise LengthMismatchError(
            f"length mismatch for {stem}: {len(blob)} bytes, header implies {header.nbytes}")
    arr = np.frombuffer(blob, dtype=DTYPES[header.dtype]).reshape(header.shape)
    native = arr.astype(arr.dtype.newbyteorder("="))
    if header.kind == "labels":
        return header, LabelVolume(native, header.region_table or {}, header.voxel_size)
    return header, native


def write_csv(path: str | os.PathLike, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    text_rows = []
    for row in rows:
        text_rows.append([repr(v) if isinstance(v, float) else v for v in row])
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(text_rows)


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _region_names(n_regions: int) -> dict[int, str]:
    return {0: "background", **{i: f"region_{i}" for i in range(1, n_regions)}}


def synth_subject(seed: int, shape: Sequence[int] = (32, 32, 32), n_regions: int = 6,
                  jitter: float = 1.0, layout_seed: int = 0):
    """Geometric label map and matching image, intensities scaled to [0, 1].

    Region 0 is background. Regions ``1..n_regions-1`` are ellipsoids and
    boxes from a shared layout (``layout_seed``), shifted and resized per
    subject by ``jitter``. The image gives each region its own contrast,
    multiplies a smooth bias field, blurs with sigma 1 voxel and min-max
    scales.

    Returns ``(image, LabelVolume)``.
    """
    shape = tuple(int(n) for n in shape)
    if n_regions < 2:
        raise ValueError("n_regions must be >= 2")
    if len(shape) not in (2, 3) or min(shape) < 4:
        raise ValueError(f"shape {shape} too small")
    layout = np.random.default_rng(layout_seed)
    rng = np.random.default_rng([int(seed), 0x5EED])
    d = len(shape)
    dims = np.array(shape, dtype=np.float64)
    grid = np.indices(shape, dtype=np.float64)
    labels = np.zeros(shape, dtype=np.uint16)
    contrast = np.zeros(n_regions)
    contrast[0] = 0.05
    for region in range(1, n_regions):
        center = layout.uniform(0.3, 0.7, d) * dims
        radii = layout.uniform(0.12, 0.3, d) * dims
        base_contrast = layout.uniform(0.2, 1.0)
        center = center + rng.normal(0.0, 1.0, d) * jitter
        radii = radii * (1.0 + rng.normal(0.0, 0.05, d) * jitter)
        contrast[region] = np.clip(base_contrast + rng.normal(0.0, 0.03) * jitter, 0.1, 1.0)
        rel = [(grid[a] - center[a]) / radii[a] for a in range(d)]
        if region % 2:
            inside = sum(r * r for r in rel) <= 1.0
        else:
            inside = np.all([np.abs(r) <= 1.0 for r in rel], axis=0)
        labels[inside] = region
    present = set(np.unique(labels).tolist())
    if present != set(range(n_regions)):
        missing = sorted(set(range(n_regions)) - present)
        raise ValueError(f"shape {shape} too small for {n_regions} regions; regions {missing} vanished")

    coeffs = rng.normal(0.0, 0.1, d)
    bias = 1.0 + sum(coeffs[a] * (grid[a] / dims[a] - 0.5) for a in range(d))
    image = ndimage.gaussian_filter(contrast[labels] * bias, sigma=1.0, mode="nearest")
    lo, hi = image.min(), image.max()
    image = (image - lo) / (hi - lo)
    return image, LabelVolume(labels, _region_names(n_regions))


def make_atlas(shape: Sequence[int] = (32, 32, 32), n_regions: int = 6, layout_seed: int = 0):
    """The unjittered layout, used as the fixed reference for registration."""
    return synth_subject(-1 & 0xFFFF, shape, n_regions, jitter=0.0, layout_seed=layout_seed)
