"""Gradient-descent non-linear registration with intensity + smoothness terms.

Energy of a displacement field ``u`` (voxel units, shape ``(d, *spatial)``)::

    E(u) = sum_x (moving(x + u(x)) - fixed(x))**2
           + lambda * sum_x sum_c sum_a (u_c(x + e_a) - u_c(x))**2

Forward differences clamp at the upper edge, so the last difference along
each axis is zero. All arithmetic runs through the RRContext.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .mca import RRContext
from .nn import resample, resample_with_gradient

__all__ = [
    "DivergenceError",
    "EnergyTrace",
    "RegistrationConfig",
    "energy",
    "energy_and_gradient",
    "register",
]


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, value: float) -> None:
        super().__init__(f"energy became {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass(frozen=True)
class RegistrationConfig:
    lambda_smooth: float = 0.1
    step_size: float = 1.0
    iterations: int = 200
    stop_tol: float = 1e-10
    min_step: float = 1e-12
    step_growth: float = 1.0

    def __post_init__(self) -> None:
        for name in ("lambda_smooth", "step_size", "stop_tol", "min_step", "step_growth"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.lambda_smooth < 0 or self.stop_tol < 0:
            raise ValueError("lambda_smooth and stop_tol must be >= 0")
        if self.step_size <= 0 or self.min_step <= 0:
            raise ValueError("step_size and min_step must be > 0")
        if self.step_growth < 1:
            raise ValueError("step_growth must be >= 1")
        if int(self.iterations) != self.iterations or self.iterations <= 0:
            raise ValueError("iterations must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnergyTrace:
    """Energy, gradient norm and step size at the start of each iteration."""

    energies: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    steps: list[float] = field(default_factory=list)
    final_energy: float | None = None
    stopped: str = ""

    def __len__(self) -> int:
        return len(self.energies)

    def record(self, e: float, gnorm: float, step: float) -> None:
        self.energies.append(float(e))
        self.grad_norms.append(float(gnorm))
        self.steps.append(float(step))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "energy", "grad_norm", "step"])
            for i, (e, g, s) in enumerate(zip(self.energies, self.grad_norms, self.steps)):
                w.writerow([i, repr(e), repr(g), repr(s)])


def _check(moving, fixed, u) -> int:
    d = np.shape(u)[0]
    if np.shape(moving) != np.shape(fixed):
        raise ValueError(f"shape mismatch: moving {np.shape(moving)} vs fixed {np.shape(fixed)}")
    if np.shape(u) != (np.ndim(fixed),) + np.shape(fixed):
        raise ValueError(f"displacement shape {np.shape(u)} does not match image {np.shape(fixed)}")
    return d


def _forward_diffs(u, ctx: RRContext) -> list[list]:
    d = np.shape(u)[0]
    out = []
    for c in range(d):
        row = []
        for a in range(d):
            n = np.shape(u)[1 + a]
            hi = [slice(None)] * d
            lo = [slice(None)] * d
            hi[a] = slice(1, n)
            lo[a] = slice(0, n - 1)
            diff = ctx.sub(u[c][tuple(hi)], u[c][tuple(lo)])
            edge_shape = list(np.shape(u)[1:])
            edge_shape[a] = 1
            row.append(np.concatenate([diff, np.zeros(edge_shape)], axis=a))
        out.append(row)
    return out


def _smoothness(diffs, ctx: RRContext):
    stacked = np.stack([dd for row in diffs for dd in row])
    return ctx.sum(ctx.mul(stacked, stacked))


def energy(moving, fixed, u, cfg: RegistrationConfig, ctx: RRContext) -> float:
    """Intensity + smoothness energy of displacement ``u``."""
    _check(moving, fixed, u)
    warped = resample(moving, u, ctx)
    r = ctx.sub(warped, fixed)
    data = ctx.sum(ctx.mul(r, r))
    smooth = _smoothness(_forward_diffs(u, ctx), ctx)
    return float(ctx.add(data, ctx.mul(cfg.lambda_smooth, smooth)))


def energy_and_gradient(moving, fixed, u, cfg: RegistrationConfig, ctx: RRContext):
    """Energy and its analytic gradient w.r.t. ``u``.

    Intensity part: ``2 r(x) dW/dp_c``. Smoothness part:
    ``2 lambda sum_a (D_a u_c(x - e_a) - D_a u_c(x))``.
    """
    d = _check(moving, fixed, u)
    warped, dwarp = resample_with_gradient(moving, u, ctx)
    r = ctx.sub(warped, fixed)
    data = ctx.sum(ctx.mul(r, r))
    diffs = _forward_diffs(u, ctx)
    smooth = _smoothness(diffs, ctx)
    e = ctx.add(data, ctx.mul(cfg.lambda_smooth, smooth))

    two_r = ctx.mul(2.0, r)
    two_lambda = ctx.mul(2.0, cfg.lambda_smooth)
    grads = []
    for c in range(d):
        acc = None
        for a in range(d):
            dd = diffs[c][a]
            n = np.shape(dd)[a]
            prev = np.concatenate(
                [np.zeros_like(np.take(dd, [0], axis=a)), np.take(dd, range(n - 1), axis=a)], axis=a)
            term = ctx.sub(prev, dd)
            acc = term if acc is None else ctx.add(acc, term)
        g_int = ctx.mul(two_r, dwarp[c])
        grads.append(ctx.add(g_int, ctx.mul(two_lambda, acc)))
    return float(e), np.stack(grads)


def register(moving, fixed, cfg: RegistrationConfig | None = None, ctx: RRContext | None = None):
    """Gradient descent on ``u`` from zero with backtracking step halving.

    A trial step is accepted when it does not increase the energy; otherwise
    the step is halved. After an accepted step it is multiplied by
    ``cfg.step_growth`` (1 keeps it fixed). Stops after ``cfg.iterations`` iterations, when the
    gradient norm falls below ``stop_tol``, or when the step falls below
    ``min_step``.

    Returns
    -------
    (u, trace) : displacement field and :class:`EnergyTrace`.

    Raises
    ------
    DivergenceError
        If the energy becomes NaN or infinite.
    """
    cfg = cfg or RegistrationConfig()
    ctx = ctx or RRContext.ieee()
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    u = np.zeros((fixed.ndim,) + fixed.shape)
    e, g = energy_and_gradient(moving, fixed, u, cfg, ctx)
    if not math.isfinite(e):
        raise DivergenceError(0, e)
    trace = EnergyTrace()
    step = cfg.step_size
    for it in range(cfg.iterations):
        gnorm = float(ctx.sqrt(ctx.sum(ctx.mul(g, g))))
        trace.record(e, gnorm, step)
        if gnorm < cfg.stop_tol:
            trace.stopped = "tolerance"
            break
        while True:
            u_new = ctx.sub(u, ctx.mul(step, g))
            e_new, g_new = energy_and_gradient(moving, fixed, u_new, cfg, ctx)
            if not math.isfinite(e_new):
                raise DivergenceError(it, e_new)
            if e_new <= e:
                break
            step = float(ctx.mul(step, 0.5))
            if step < cfg.min_step:
                break
        if step < cfg.min_step:
            trace.stopped = "step"
            break
        u, e, g = u_new, e_new, g_new
        if cfg.step_growth != 1.0:
            step = float(ctx.mul(step, cfg.step_growth))
    else:
        trace.stopped = "iterations"
    trace.final_energy = e
    return u, trace
