"""Minimal CNN inference engine whose arithmetic runs through an RRContext.

Tensors are float64 numpy arrays laid out ``(channels, *batch, *spatial)``.
The number of spatial axes is taken from the kernel (``kernel.ndim - 2``), so
a 2D network can run over a stack of slices held in a batch axis.

Accumulation order is part of the contract because it fixes the Random
Rounding trajectory:

* ``conv``: the accumulator starts at the bias, then adds ``w * x`` for each
  kernel tap in row-major order and, within a tap, for input channels in
  increasing order.
* ``resample``: corners of the interpolation cell are visited in row-major
  order over ``{0, 1}**d``; each corner weight is the product of per-axis
  weights taken in axis order.
"""

from __future__ import annotations

import itertools
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .mca import RRContext
from .segmetrics import LabelVolume

__all__ = [
    "ACTIVATIONS",
    "ShapeError",
    "UNetSpec",
    "WeightStore",
    "activation",
    "argmax_labels",
    "conv",
    "maxpool",
    "resample",
    "resample_with_gradient",
    "unet_features",
    "unet_forward",
    "upsample",
]

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "softmax")


class ShapeError(ValueError):
    pass


def conv(x, kernel, bias, ctx: RRContext):
    """Stride-1 cross-correlation with zero ("same") padding.

    Parameters
    ----------
    x : array (C_in, *batch, *spatial)
    kernel : array (C_out, C_in, *k), odd k
    bias : array (C_out,)
    """
    kernel_shape = np.shape(kernel)
    if len(kernel_shape) < 3:
        raise ShapeError(f"kernel must be (C_out, C_in, *k), got {kernel_shape}")
    c_out, c_in, *ks = kernel_shape
    d = len(ks)
    if np.ndim(x) < d + 1:
        raise ShapeError(f"input {np.shape(x)} has fewer than {d} spatial axes plus channels")
    if np.shape(x)[0] != c_in:
        raise ShapeError(f"input has {np.shape(x)[0]} channels, kernel expects {c_in}")
    if np.shape(bias) != (c_out,):
        raise ShapeError(f"bias shape {np.shape(bias)} does not match {c_out} output channels")
    if any(k % 2 == 0 for k in ks):
        raise ShapeError(f"kernel sizes must be odd, got {ks}")

    rest = np.shape(x)[1:]
    spatial = rest[-d:]
    n_batch = len(rest) - d
    pad = [(0, 0)] * (1 + n_batch) + [(k // 2, k // 2) for k in ks]
    xp = np.pad(x, pad) if any(k > 1 for k in ks) else x
    expand = (slice(None),) + (None,) * len(rest)

    acc = np.broadcast_to(bias[expand], (c_out,) + rest)
    for tap in itertools.product(*(range(k) for k in ks)):
        window = xp[(slice(None),) + (slice(None),) * n_batch
                    + tuple(slice(t, t + n) for t, n in zip(tap, spatial))]
        for ci in range(c_in):
            w = kernel[(slice(None), ci) + tap]
            term = ctx.mul(w[expand], window[ci][None])
            acc = ctx.add(acc, term)
    return acc


def maxpool(x, window: Sequence[int], ctx: RRContext | None = None):
    """Non-overlapping max pooling over the trailing ``len(window)`` axes.

    Comparisons are exact, so the result does not depend on ``ctx``.
    """
    window = tuple(int(w) for w in window)
    d = len(window)
    shape = np.shape(x)
    lead, spatial = shape[:-d], shape[-d:]
    if any(n % w for n, w in zip(spatial, window)):
        raise ShapeError(f"spatial shape {spatial} not divisible by window {window}")
    split = lead + tuple(v for n, w in zip(spatial, window) for v in (n // w, w))
    axes = tuple(len(lead) + 2 * i + 1 for i in range(d))
    return np.asanyarray(x).reshape(split).max(axis=axes)


def upsample(x, factor: int, d: int):
    """Nearest-neighbour upsampling of the trailing ``d`` axes."""
    out = x
    for ax in range(np.ndim(x) - d, np.ndim(x)):
        out = np.repeat(out, factor, axis=ax)
    return out


def activation(x, kind: str, ctx: RRContext, slope: float = 0.2):
    """Element-wise activation; ``softmax`` normalises over axis 0 (channels)."""
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, ctx.mul(x, slope))
    if kind == "tanh":
        return ctx.tanh(x)
    if kind == "softmax":
        z = ctx.sub(x, np.max(x, axis=0, keepdims=True))
        e = ctx.exp(z)
        total = ctx.cumulative_sum(e, axis=0)
        return ctx.div(e, total[None])
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class BlockSpec:
    name: str
    in_channels: int
    out_channels: int
    skip_from: str | None = None


@dataclass(frozen=True)
class UNetSpec:
    """Four encoder blocks, three decoder blocks, 1x1 head.

    Encoder block ``i`` is conv + activation, followed by 2x max pooling for
    the first three. Decoder block ``j`` upsamples 2x, concatenates the
    pre-pool output of encoder block ``4 - j`` and applies conv +
    activation. ``head="warp"`` scales the head output by ``warp_scale``.
    """

    ndim: int = 3
    in_channels: int = 2
    out_channels: int = 3
    encoder_channels: tuple[int, ...] = (4, 8, 8, 8)
    decoder_channels: tuple[int, ...] = (8, 8, 4)
    kernel_size: int = 3
    activation: str = "leaky_relu"
    head: str = "warp"
    warp_scale: float = 2.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 3:
            raise ValueError("UNetSpec needs exactly 4 encoder and 3 decoder blocks")
        if self.ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {self.ndim}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.activation not in ("relu", "leaky_relu", "tanh"):
            raise ValueError(f"unsupported block activation {self.activation!r}")
        if self.head not in ("warp", "logits"):
            raise ValueError(f"head must be 'warp' or 'logits', got {self.head!r}")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.encoder_channels) - 1)

    def blocks(self) -> list[BlockSpec]:
        out: list[BlockSpec] = []
        c = self.in_channels
        for i, ch in enumerate(self.encoder_channels, start=1):
            out.append(BlockSpec(f"enc{i}", c, ch))
            c = ch
        for j, ch in enumerate(self.decoder_channels, start=1):
            skip = 4 - j
            out.append(BlockSpec(f"dec{j}", c + self.encoder_channels[skip - 1], ch, f"enc{skip}"))
            c = ch
        out.append(BlockSpec("head", c, self.out_channels))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UNetSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class WeightStore:
    """Named kernels and biases for a :class:`UNetSpec`."""

    spec: UNetSpec
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.check()

    def check(self) -> None:
        if not self.tensors:
            return
        for block in self.spec.blocks():
            k = 1 if block.name == "head" else self.spec.kernel_size
            want_w = (block.out_channels, block.in_channels) + (k,) * self.spec.ndim
            for name, want in ((f"{block.name}.weight", want_w),
                               (f"{block.name}.bias", (block.out_channels,))):
                got = np.shape(self.tensors.get(name))
                if got != want:
                    raise ShapeError(f"{name}: expected shape {want}, got {got}")

    @classmethod
    def generate(cls, spec: UNetSpec, seed: int = 0) -> "WeightStore":
        """He-scaled normal kernels, small normal biases, from ``seed``."""
        rng = np.random.default_rng(seed)
        tensors: dict[str, np.ndarray] = {}
        for block in spec.blocks():
            k = 1 if block.name == "head" else spec.kernel_size
            fan_in = block.in_channels * k**spec.ndim
            gain = 1.0 if block.name == "head" else 2.0
            shape = (block.out_channels, block.in_channels) + (k,) * spec.ndim
            tensors[f"{block.name}.weight"] = rng.normal(0.0, np.sqrt(gain / fan_in), shape)
            tensors[f"{block.name}.bias"] = rng.normal(0.0, 0.05, block.out_channels)
        return cls(spec, tensors)

    def save(self, directory: str | os.PathLike) -> Path:
        """Write ``weights.json`` plus one little-endian f64 blob per tensor."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"spec": self.spec.to_dict(), "tensors": {}}
        for name in sorted(self.tensors):
            blob = f"{name}.raw"
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            _atomic_write(directory / blob, arr.tobytes())
            manifest["tensors"][name] = {"shape": list(arr.shape), "dtype": "f64", "file": blob}
        path = directory / "weights.json"
        _atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        return path

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "WeightStore":
        directory = Path(directory)
        if directory.is_file():
            directory = directory.parent
        manifest = json.loads((directory / "weights.json").read_text())
        spec = UNetSpec.from_dict(manifest["spec"])
        tensors = {}
        for name, meta in manifest["tensors"].items():
            if meta.get("dtype") != "f64":
                raise ValueError(f"{name}: unsupported dtype {meta.get('dtype')!r}")
            raw = (directory / meta["file"]).read_bytes()
            shape = tuple(meta["shape"])
            if len(raw) != 8 * int(np.prod(shape)):
                raise ValueError(f"{name}: length mismatch ({len(raw)} bytes for shape {shape})")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        return cls(spec, tensors)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def unet_features(spec: UNetSpec, weights: WeightStore, x, ctx: RRContext):
    """Encoder and decoder blocks; returns the last decoder activation."""
    d = spec.ndim
    if np.ndim(x) < d + 1 or np.shape(x)[0] != spec.in_channels:
        raise ShapeError(f"input shape {np.shape(x)}: expected ({spec.in_channels}, ..., "
                         f"{d} spatial axes)")
    spatial = np.shape(x)[-d:]
    if any(n % spec.divisor for n in spatial):
        raise ShapeError(f"spatial shape {spatial} must be divisible by {spec.divisor}")
    t = weights.tensors
    pool = (2,) * d
    skips = {}
    h = x
    for i in range(1, 5):
        name = f"enc{i}"
        try:
            h = activation(conv(h, t[f"{name}.weight"], t[f"{name}.bias"], ctx), spec.activation, ctx)
        except ShapeError as exc:
            raise ShapeError(f"encoder block {i}: {exc}") from None
        skips[name] = h
        if i < 4:
            h = maxpool(h, pool, ctx)
    for j in range(1, 4):
        name = f"dec{j}"
        skip = skips[f"enc{4 - j}"]
        h = upsample(h, 2, d)
        if np.shape(h)[1:] != np.shape(skip)[1:]:
            raise ShapeError(f"decoder block {j}: upsampled {np.shape(h)} vs skip {np.shape(skip)}")
        h = np.concatenate([h, skip], axis=0)
        try:
            h = activation(conv(h, t[f"{name}.weight"], t[f"{name}.bias"], ctx), spec.activation, ctx)
        except ShapeError as exc:
            raise ShapeError(f"decoder block {j}: {exc}") from None
    return h


def unet_forward(spec: UNetSpec, weights: WeightStore, x, ctx: RRContext):
    """Forward pass; returns head output ``(out_channels, *batch, *spatial)``."""
    h = unet_features(spec, weights, x, ctx)
    t = weights.tensors
    out = conv(h, t["head.weight"], t["head.bias"], ctx)
    if spec.head == "warp":
        out = ctx.mul(out, spec.warp_scale)
    return out


def _cell(coords_clamped, sizes):
    i0 = []
    for c, n in zip(coords_clamped, sizes):
        lo = np.floor(np.asarray(c)).astype(np.intp)
        i0.append(np.minimum(lo, max(n - 2, 0)))
    i1 = [np.minimum(lo + 1, n - 1) for lo, n in zip(i0, sizes)]
    return i0, i1


def _prepare(image, warp, ctx: RRContext):
    d = np.shape(warp)[0]
    spatial = np.shape(warp)[1:]
    if len(spatial) != d:
        raise ShapeError(f"warp must be (d, *spatial) with d spatial axes, got {np.shape(warp)}")
    if np.shape(image)[-d:] != spatial:
        raise ShapeError(f"image {np.shape(image)} does not match warp grid {spatial}")
    grid = np.indices(spatial, dtype=np.float64)
    weights_lo, weights_hi, inside = [], [], []
    coords = []
    for a in range(d):
        p = ctx.add(grid[a], warp[a])
        n = spatial[a]
        inside.append((p >= 0) & (p <= n - 1))
        coords.append(np.clip(p, 0.0, float(n - 1)))
    i0, i1 = _cell(coords, spatial)
    for a in range(d):
        f = ctx.sub(coords[a], i0[a].astype(np.float64))
        weights_hi.append(f)
        weights_lo.append(ctx.sub(1.0, f))
    return d, i0, i1, weights_lo, weights_hi, inside


def _gather(image, idx):
    return image[(Ellipsis,) + tuple(idx)]


def resample(image, warp, ctx: RRContext):
    """Multilinear interpolation of ``image`` at ``x + warp(x)``; edges clamp.

    ``image`` is ``(*lead, *spatial)`` and ``warp`` is ``(d, *spatial)`` in
    voxel units.
    """
    d, i0, i1, lo, hi, _ = _prepare(image, warp, ctx)
    acc = None
    for corner in itertools.product((0, 1), repeat=d):
        w = None
        idx = []
        for a, c in enumerate(corner):
            wa = hi[a] if c else lo[a]
            w = wa if w is None else ctx.mul(w, wa)
            idx.append(i1[a] if c else i0[a])
        term = ctx.mul(w, _gather(image, idx))
        acc = term if acc is None else ctx.add(acc, term)
    return acc


def resample_with_gradient(image, warp, ctx: RRContext):
    """Interpolated values plus their derivative w.r.t. each sample coordinate.

    The value path is identical to :func:`resample`. The derivative along
    axis ``a`` sums ``w_other * (v[a=1] - v[a=0])`` over the cell's faces in
    row-major order, and is zero where axis ``a`` was clamped.
    """
    d, i0, i1, lo, hi, inside = _prepare(image, warp, ctx)
    values = {}
    acc = None
    for corner in itertools.product((0, 1), repeat=d):
        w = None
        idx = []
        for a, c in enumerate(corner):
            wa = hi[a] if c else lo[a]
            w = wa if w is None else ctx.mul(w, wa)
            idx.append(i1[a] if c else i0[a])
        v = _gather(image, idx)
        values[corner] = v
        term = ctx.mul(w, v)
        acc = term if acc is None else ctx.add(acc, term)

    grads = []
    for a in range(d):
        g = None
        for rest in itertools.product((0, 1), repeat=d - 1):
            c0 = rest[:a] + (0,) + rest[a:]
            c1 = rest[:a] + (1,) + rest[a:]
            diff = ctx.sub(values[c1], values[c0])
            w = None
            for b, cb in zip([b for b in range(d) if b != a], rest):
                wb = hi[b] if cb else lo[b]
                w = wb if w is None else ctx.mul(w, wb)
            term = diff if w is None else ctx.mul(w, diff)
            g = term if g is None else ctx.add(g, term)
        grads.append(np.where(inside[a], g, 0.0))
    return acc, np.stack(grads)


def argmax_labels(logits, region_ids: Sequence[int] | None = None,
                  region_table: dict[int, str] | None = None) -> LabelVolume:
    """Per-voxel argmax over axis 0; exact ties go to the lowest channel."""
    logits = np.asarray(logits)
    if logits.ndim < 2:
        raise ShapeError("logits need a channel axis plus at least one spatial axis")
    idx = np.argmax(logits, axis=0)
    n = logits.shape[0]
    ids = np.arange(n) if region_ids is None else np.asarray(region_ids)
    if len(ids) != n:
        raise ShapeError(f"{len(ids)} region ids for {n} channels")
    labels = ids[idx]
    table = region_table or {int(i): f"region_{int(i)}" for i in ids}
    return LabelVolume(labels.astype(np.uint16), dict(table))
