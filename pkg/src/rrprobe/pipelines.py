"""Desk-scale pipelines run under one RRContext per sample.

``cnn-register`` and ``gd-register`` map a subject onto the atlas and return
a warp plus the resampled subject. ``cnn-segment`` labels the subject with a
slice-wise 2D U-Net whose inputs are the image and the atlas label prior
(one channel per region); ``gd-segment`` registers the atlas onto the subject and
carries the atlas labels across.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .mca import RRContext
from .nn import (UNetSpec, WeightStore, activation, argmax_labels, resample, unet_features,
                 unet_forward)
from .registration import EnergyTrace, RegistrationConfig, register
from .segmetrics import LabelVolume
from .volume_io import make_atlas, synth_subject

__all__ = [
    "PIPELINES",
    "PipelineConfig",
    "SampleResult",
    "default_weights",
    "fit_segmentation_weights",
    "segmentation_input",
    "run_pipeline",
]

PIPELINES = ("cnn-register", "gd-register", "cnn-segment", "gd-segment")
SEGMENT_TRAINING_SEEDS = (1001, 1002, 1003)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything except the subject and the RR context that fixes a run."""

    pipeline: str
    shape: tuple[int, ...] = (32, 32, 32)
    n_regions: int = 6
    layout_seed: int = 0
    weights_seed: int = 0
    ridge: float = 1e-3
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def __post_init__(self) -> None:
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}; expected one of {PIPELINES}")
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if self.n_regions < 2:
            raise ValueError("n_regions must be >= 2")
        if self.ridge <= 0:
            raise ValueError("ridge must be > 0")
        if self.pipeline.startswith("cnn"):
            spec = self.unet_spec()
            spatial = self.shape[-spec.ndim:]
            if any(n % spec.divisor for n in spatial):
                raise ValueError(f"shape {self.shape} must be divisible by {spec.divisor} "
                                 f"along its last {spec.ndim} axes")

    def unet_spec(self) -> UNetSpec:
        if self.pipeline == "cnn-register":
            return UNetSpec(ndim=len(self.shape), in_channels=2, out_channels=len(self.shape))
        return UNetSpec(ndim=2, in_channels=1 + self.n_regions, out_channels=self.n_regions,
                        encoder_channels=(8, 16, 16, 16), decoder_channels=(16, 16, 32),
                        head="logits")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["shape"] = tuple(d["shape"])
        d["registration"] = RegistrationConfig(**d.get("registration", {}))
        return cls(**d)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class SampleResult:
    warp: np.ndarray | None = None
    image: np.ndarray | None = None
    labels: LabelVolume | None = None
    trace: EnergyTrace | None = None


def _one_hot(labels: np.ndarray, regions: Sequence[int]) -> np.ndarray:
    return np.stack([(labels == r).astype(np.float64) for r in regions])


def segmentation_input(image: np.ndarray, prior: LabelVolume, regions: Sequence[int]) -> np.ndarray:
    """Stack the image with the one-hot atlas prior: ``(1 + R, *shape)``."""
    return np.concatenate([np.asarray(image, dtype=np.float64)[None], _one_hot(prior.labels, regions)])


def fit_segmentation_weights(spec: UNetSpec, seed: int, inputs: Sequence[np.ndarray],
                             labels: Sequence[LabelVolume], regions: Sequence[int],
                             ridge: float = 1e-3) -> WeightStore:
    """Random encoder/decoder weights with a ridge-fitted 1x1 head.

    The head is the class-balanced least-squares map from last-layer
    features (plus a constant) to one-hot labels over the training volumes,
    computed in plain IEEE arithmetic. This is weight preparation, not
    inference.
    """
    weights = WeightStore.generate(spec, seed)
    ieee = RRContext.ieee()
    feats, targets = [], []
    for x, lab in zip(inputs, labels):
        h = np.asarray(unet_features(spec, weights, x, ieee))
        feats.append(h.reshape(h.shape[0], -1).T)
        targets.append(_one_hot(lab.labels, regions).reshape(len(regions), -1).T)
    x = np.concatenate(feats)
    x = np.hstack([x, np.ones((x.shape[0], 1))])
    y = np.concatenate(targets)
    # weight each voxel by the inverse frequency of its class
    freq = y.mean(axis=0)
    if np.any(freq == 0):
        raise ValueError("every region needs training voxels")
    xw = x * ((y / freq).sum(axis=1) / len(freq))[:, None]
    gram = xw.T @ x + ridge * x.shape[0] * np.eye(x.shape[1])
    coef = np.linalg.solve(gram, xw.T @ y)
    c = coef.shape[0] - 1
    tensors = dict(weights.tensors)
    tensors["head.weight"] = coef[:c].T.reshape((len(regions), c) + (1,) * spec.ndim).copy()
    tensors["head.bias"] = coef[c].copy()
    return WeightStore(spec, tensors)


@functools.lru_cache(maxsize=8)
def _atlas(shape: tuple[int, ...], n_regions: int, layout_seed: int):
    return make_atlas(shape, n_regions, layout_seed)


@functools.lru_cache(maxsize=8)
def default_weights(cfg: PipelineConfig) -> WeightStore:
    """Seeded weights for ``cfg``; segmentation heads are fitted on training subjects."""
    spec = cfg.unet_spec()
    if cfg.pipeline == "cnn-register":
        return WeightStore.generate(spec, cfg.weights_seed)
    atlas, atlas_labels = _atlas(cfg.shape, cfg.n_regions, cfg.layout_seed)
    regions = atlas_labels.regions
    inputs = [segmentation_input(atlas, atlas_labels, regions)]
    labels = [atlas_labels]
    for s in SEGMENT_TRAINING_SEEDS:
        img, lab = synth_subject(s, cfg.shape, cfg.n_regions, layout_seed=cfg.layout_seed)
        inputs.append(segmentation_input(img, atlas_labels, regions))
        labels.append(lab)
    return fit_segmentation_weights(spec, cfg.weights_seed, inputs, labels,
                                    atlas_labels.regions, cfg.ridge)


def run_pipeline(cfg: PipelineConfig, subject: np.ndarray, ctx: RRContext,
                 weights: WeightStore | None = None) -> SampleResult:
    """Run ``cfg.pipeline`` on ``subject`` with every FP op through ``ctx``."""
    subject = np.asarray(subject, dtype=np.float64)
    if subject.shape != cfg.shape:
        raise ValueError(f"subject shape {subject.shape} does not match config {cfg.shape}")
    atlas, atlas_labels = _atlas(cfg.shape, cfg.n_regions, cfg.layout_seed)
    regions = atlas_labels.regions
    if cfg.pipeline.startswith("cnn"):
        weights = weights or default_weights(cfg)
        if weights.spec != cfg.unet_spec():
            raise ValueError("weights were built for a different network layout")

    if cfg.pipeline == "cnn-register":
        warp = np.asarray(unet_forward(weights.spec, weights, np.stack([subject, atlas]), ctx))
        return SampleResult(warp=warp, image=np.asarray(resample(subject, warp, ctx)))
    if cfg.pipeline == "gd-register":
        u, trace = register(subject, atlas, cfg.registration, ctx)
        return SampleResult(warp=u, image=np.asarray(resample(subject, u, ctx)), trace=trace)
    if cfg.pipeline == "cnn-segment":
        x = segmentation_input(subject, atlas_labels, regions)
        logits = unet_forward(weights.spec, weights, x, ctx)
        probs = activation(logits, "softmax", ctx)
        return SampleResult(labels=argmax_labels(probs, regions, atlas_labels.region_table))
    # gd-segment: atlas -> subject, then interpolate atlas one-hot channels
    u, trace = register(atlas, subject, cfg.registration, ctx)
    probs = np.stack([np.asarray(resample(ch, u, ctx)) for ch in _one_hot(atlas_labels.labels, regions)])
    return SampleResult(warp=u, labels=argmax_labels(probs, regions, atlas_labels.region_table),
                        trace=trace)
