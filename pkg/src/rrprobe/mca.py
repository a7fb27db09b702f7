"""Random Rounding arithmetic over binary64 numpy arrays.

Every operation computes the IEEE result, then adds uniform noise scaled to
the operand's binary exponent at virtual precision ``t``::

    inexact(x) = x + 2**(e_x - t) * xi,   xi ~ U(-1/2, 1/2)

Operations are vectorised: an op on an array perturbs each element with its
own draw, in C order, so the per-element result equals the scalar program
executing the same operation sequence.
"""

from __future__ import annotations

import enum
import math
from fractions import Fraction
from typing import Callable

import numpy as np

__all__ = [
    "AuditArray",
    "Mode",
    "OpAudit",
    "RRContext",
    "RRScalar",
    "derive_seed",
    "draw_to_xi",
    "inexact",
    "perturb",
    "validate_precision",
]

_EXP_MASK = np.uint64(0x7FF0000000000000)
# xi = k * 2**-53 - (1/2 - 2**-54) is exact and lies strictly inside (-1/2, 1/2)
_XI_OFFSET = 0.5 - 2.0**-54
_SPLIT = 134217729.0  # 2**27 + 1


class Mode(str, enum.Enum):
    IEEE = "ieee"
    RR = "rr"


def validate_precision(t: int) -> int:
    if isinstance(t, bool) or int(t) != t or not 1 <= t <= 53:
        raise ValueError(f"virtual precision must be an integer in [1, 53], got {t!r}")
    return int(t)


def derive_seed(seed0: int, index: int) -> int:
    """64-bit seed for sample ``index`` of a run seeded with ``seed0``.

    Depends only on the pair, so samples can run in any order or process.
    """
    ss = np.random.SeedSequence([int(seed0) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def draw_to_xi(words: np.ndarray) -> np.ndarray:
    """Map raw 64-bit words to xi in the open interval (-1/2, 1/2).

    Uses the top 53 bits: ``xi = (2k - 2**53 + 1) * 2**-54``.
    """
    k = (np.asarray(words, dtype=np.uint64) >> np.uint64(11)).astype(np.int64)
    return (2 * k - (1 << 53) + 1).astype(np.float64) * 2.0**-54


def inexact(x, t: int, xi):
    """Return ``x + 2**(e_x - t) * xi`` rounded to binary64.

    ``e_x = floor(log2 |x|)`` is read from the representation (``frexp``), so
    subnormals use their true leading-bit exponent. ``x`` must be finite and
    nonzero; callers go through :func:`perturb` for the exemptions.
    """
    x = np.asarray(x, dtype=np.float64)
    _, e = np.frexp(x)
    out = x + np.ldexp(np.asarray(xi, dtype=np.float64), e - 1 - t)
    return out[()] if out.ndim == 0 else out


class OpAudit:
    """Counts floating-point arithmetic performed outside an :class:`RRContext`.

    Wrap engine inputs with :meth:`wrap`; every float ufunc applied to the
    resulting arrays by code other than the context adds its element count
    to :attr:`count`.
    """

    def __init__(self) -> None:
        self.count = 0
        self.calls: list[str] = []

    def wrap(self, a) -> "AuditArray":
        arr = np.asarray(a, dtype=np.float64).view(AuditArray)
        arr._audit = self
        return arr


# Ufuncs that round. Comparisons, max/min, abs, negation, floor and the like
# are exact and are not FP arithmetic in the RR sense.
_COUNTED_UFUNCS = {
    np.add, np.subtract, np.multiply, np.divide, np.true_divide, np.power,
    np.float_power, np.sqrt, np.cbrt, np.square, np.reciprocal, np.exp,
    np.exp2, np.expm1, np.log, np.log2, np.log10, np.log1p, np.sin, np.cos,
    np.tan, np.arcsin, np.arccos, np.arctan, np.arctan2, np.sinh, np.cosh,
    np.tanh, np.hypot, np.matmul, np.logaddexp, np.fmod, np.remainder,
}
_COUNTED_FUNCTIONS = {
    np.dot, np.vdot, np.inner, np.outer, np.einsum, np.tensordot,
    np.convolve, np.correlate, np.cumsum, np.cumprod, np.prod, np.sum,
    np.mean, np.average, np.var, np.std, np.interp, np.linalg.norm,
}


class AuditArray(np.ndarray):
    _audit: OpAudit | None = None

    def __array_finalize__(self, obj):
        self._audit = getattr(obj, "_audit", None)

    def __array_ufunc__(self, ufunc, method, *inputs, out=None, **kwargs):
        audit = _find_audit(inputs)
        raw = tuple(np.asarray(i) if isinstance(i, AuditArray) else i for i in inputs)
        if out is not None:
            kwargs["out"] = tuple(np.asarray(o) if isinstance(o, AuditArray) else o for o in out)
        result = getattr(ufunc, method)(*raw, **kwargs)
        if audit is not None and ufunc in _COUNTED_UFUNCS and _any_float(raw):
            size = max((np.size(i) for i in raw), default=1)
            audit.count += int(size)
            audit.calls.append(f"{ufunc.__name__}.{method}")
        return _rewrap(result, audit)

    def __array_function__(self, func, types, args, kwargs):
        audit = _find_audit(args) or _find_audit(kwargs.values())
        if audit is not None and func in _COUNTED_FUNCTIONS:
            audit.count += int(max((np.size(a) for a in args if isinstance(a, np.ndarray)), default=1))
            audit.calls.append(func.__name__)
        return super().__array_function__(func, types, args, kwargs)


def _find_audit(items) -> OpAudit | None:
    for i in items:
        if isinstance(i, AuditArray) and i._audit is not None:
            return i._audit
        if isinstance(i, (list, tuple)):
            found = _find_audit(i)
            if found is not None:
                return found
    return None


def _any_float(items) -> bool:
    for i in items:
        dt = getattr(i, "dtype", None)
        if dt is None:
            if isinstance(i, float):
                return True
        elif np.issubdtype(dt, np.inexact):
            return True
    return False


def _rewrap(result, audit):
    if audit is None:
        return result
    if isinstance(result, tuple):
        return tuple(_rewrap(r, audit) for r in result)
    if isinstance(result, np.ndarray) and not isinstance(result, AuditArray):
        result = result.view(AuditArray)
        result._audit = audit
    return result


def _raw(a) -> np.ndarray:
    if isinstance(a, AuditArray):
        return np.asarray(a).view(np.ndarray)
    return np.asarray(a, dtype=np.float64)


def _two_sum_err(a, b, s):
    bb = s - a
    return (a - (s - bb)) + (b - bb)


def _split(a):
    c = _SPLIT * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod_err(a, b, p):
    ah, al = _split(a)
    bh, bl = _split(b)
    return ((ah * bh - p) + ah * bl + al * bh) + al * bl


def _fma_exact(a: float, b: float, c: float) -> float:
    if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c)):
        return a * b + c
    return float(Fraction(a) * Fraction(b) + Fraction(c))


def _fma_err(a: float, b: float, c: float, r: float) -> float:
    if not (math.isfinite(a) and math.isfinite(b) and math.isfinite(c) and math.isfinite(r)):
        return 0.0
    return float(Fraction(a) * Fraction(b) + Fraction(c) - Fraction(r))


_fma_vec = np.frompyfunc(_fma_exact, 3, 1)
_fma_err_vec = np.frompyfunc(_fma_err, 4, 1)

_LIBM: dict[str, Callable] = {
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "pow": np.power,
}


class RRContext:
    """Seeded Random Rounding configuration.

    One context owns one counter-based Philox stream; give each concurrent
    sample its own context. In IEEE mode every op is the plain numpy op.

    Parameters
    ----------
    precision : int
        Virtual precision ``t`` in [1, 53].
    mode : Mode or str
        ``"rr"`` or ``"ieee"``.
    seed : int
        Philox key. Equal ``(seed, precision, mode)`` gives bit-identical
        results for identical operand sequences.
    only_inexact : bool
        Perturb only results whose IEEE rounding was inexact.
    """

    def __init__(self, precision: int = 53, mode: Mode | str = Mode.RR, seed: int = 0,
                 only_inexact: bool = False) -> None:
        self.precision = validate_precision(precision)
        self.mode = Mode(mode)
        self.seed = int(seed)
        self.only_inexact = bool(only_inexact)
        self._bitgen = np.random.Philox(key=self.seed & (2**128 - 1))
        self._gen = np.random.Generator(self._bitgen)
        self._scale = 2.0 ** -self.precision
        self.draws = 0

    @classmethod
    def ieee(cls) -> "RRContext":
        return cls(mode=Mode.IEEE)

    @property
    def is_ieee(self) -> bool:
        return self.mode is Mode.IEEE

    def __repr__(self) -> str:
        return (f"RRContext(precision={self.precision}, mode={self.mode.value!r}, "
                f"seed={self.seed}, only_inexact={self.only_inexact})")

    # -- noise -----------------------------------------------------------

    def draw_xi(self, n: int) -> np.ndarray:
        """Next ``n`` noise values from this context's stream."""
        xi = self._gen.random(n)
        xi -= _XI_OFFSET
        self.draws += n
        return xi

    def _perturb(self, x: np.ndarray, err: np.ndarray | None = None) -> np.ndarray:
        """Round ``x + err + 2**(e_x - t) * xi`` to binary64.

        ``x + err`` is the exact result of the operation that produced ``x``
        (``err`` omitted means ``x`` is exact). Zeros, infinities and NaNs
        pass through.
        """
        if self.is_ieee:
            return x
        x = np.asarray(x, dtype=np.float64, order="C")
        xi = self.draw_xi(x.size).reshape(x.shape)
        field = x.view(np.uint64) & _EXP_MASK
        tail = xi * self._scale
        tail *= field.view(np.float64)  # 2**e_x for normal numbers
        if err is not None:
            tail += err
        with np.errstate(invalid="ignore"):  # inf + noise*inf, discarded below
            out = x + tail
        special = (field == 0) | (field == _EXP_MASK)
        if special.any():
            out = np.where(special, x, out)
            sub = special & (x != 0) & np.isfinite(x)
            if sub.any():
                # subnormals use the exponent of their leading bit
                _, e = np.frexp(x[sub])
                noise = np.ldexp(xi[sub], e - 1 - self.precision)
                if err is not None:
                    noise = noise + np.broadcast_to(err, x.shape)[sub]
                out[sub] = x[sub] + noise
        return out

    def _op(self, r: np.ndarray, err_fn, *inputs):
        if self.is_ieee:
            return self._finish(r, *inputs)
        with np.errstate(all="ignore"):
            err = err_fn()
            err = np.where(np.isfinite(err), err, 0.0)
        if self.only_inexact:
            out = np.where(err == 0, r, self._perturb(r, err))
        else:
            out = self._perturb(r, err)
        return self._finish(out, *inputs)

    def perturb(self, x):
        """Apply one Random Rounding perturbation to ``x`` (scalar or array)."""
        return self._finish(self._perturb(_raw(x)), x)

    # -- result plumbing --------------------------------------------------

    @staticmethod
    def _finish(out: np.ndarray, *inputs):
        audit = _find_audit(inputs)
        if audit is not None:
            out = np.asarray(out).view(AuditArray)
            out._audit = audit
            return out
        if out.ndim == 0:
            return out[()]
        return out

    # -- arithmetic ------------------------------------------------------
    # Each op computes the IEEE result r and, in RR mode, its exact residual
    # err (r + err is the exact result) before a single perturbation.

    def add(self, a, b):
        ar, br = _raw(a), _raw(b)
        r = np.add(ar, br)
        return self._op(r, lambda: _two_sum_err(ar, br, r), a, b)

    def sub(self, a, b):
        ar, br = _raw(a), _raw(b)
        r = np.subtract(ar, br)
        return self._op(r, lambda: _two_sum_err(ar, -br, r), a, b)

    def mul(self, a, b):
        ar, br = _raw(a), _raw(b)
        r = np.multiply(ar, br)
        return self._op(r, lambda: _two_prod_err(ar, br, r), a, b)

    def div(self, a, b):
        ar, br = _raw(a), _raw(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.divide(ar, br)

        def err():
            p = r * br
            return ((ar - p) - _two_prod_err(r, br, p)) / br
        return self._op(r, err, a, b)

    def fma(self, a, b, c):
        """Fused ``a*b + c`` with a single rounding, then one perturbation."""
        ar, br, cr = _raw(a), _raw(b), _raw(c)
        r = np.asarray(_fma_vec(ar, br, cr), dtype=np.float64)

        def err():
            return np.asarray(_fma_err_vec(ar, br, cr, r), dtype=np.float64)
        return self._op(r, err, a, b, c)

    def sqrt(self, a):
        ar = _raw(a)
        with np.errstate(invalid="ignore"):
            r = np.sqrt(ar)

        def err():
            p = r * r
            return ((ar - p) - _two_prod_err(r, r, p)) / (2.0 * r)
        return self._op(r, err, a)

    def neg(self, a):
        """Negation is exact and never perturbed."""
        return self._finish(np.negative(_raw(a)), a)

    def square(self, a):
        return self.mul(a, a)

    def libm(self, name: str, x, y=None):
        """Elementary function with exactly one perturbation of its result.

        The residual is estimated from an extended-precision evaluation.
        """
        try:
            f = _LIBM[name]
        except KeyError:
            raise ValueError(f"unknown libm function {name!r}; expected one of {sorted(_LIBM)}") from None
        if name == "pow" and y is None:
            raise ValueError("pow needs an exponent")
        args = (_raw(x),) if y is None else (_raw(x), _raw(y))
        with np.errstate(all="ignore"):
            r = np.asarray(f(*args), dtype=np.float64)

        def err():
            hi = f(*(a.astype(np.longdouble) for a in args))
            return (hi - r).astype(np.float64)
        inputs = (x,) if y is None else (x, y)
        return self._op(r, err, *inputs)

    def exp(self, x):
        return self.libm("exp", x)

    def log(self, x):
        return self.libm("log", x)

    def sin(self, x):
        return self.libm("sin", x)

    def cos(self, x):
        return self.libm("cos", x)

    def tanh(self, x):
        return self.libm("tanh", x)

    def pow(self, x, y):
        return self.libm("pow", x, y)

    # -- reductions ------------------------------------------------------

    def sum(self, a, axis=None):
        """Pairwise sum with a fixed tree order.

        Elements are paired ``(0,1), (2,3), ...`` level by level; an odd
        trailing element is carried to the next level unchanged.
        """
        x = _raw(a)
        if axis is None:
            x = x.reshape(-1)
            axis = 0
        x = np.moveaxis(x, axis, 0)
        if x.shape[0] == 0:
            return self._finish(np.zeros(x.shape[1:]), a)
        while x.shape[0] > 1:
            n = x.shape[0]
            half = n // 2
            paired = self.add(x[0:2 * half:2], x[1:2 * half:2])
            x = np.concatenate([paired, x[2 * half:]], axis=0) if n % 2 else paired
        return self._finish(np.asarray(x[0]), a)

    def cumulative_sum(self, a, axis=0):
        """Left-to-right sum along ``axis``, vectorised over the other axes."""
        x = np.moveaxis(_raw(a), axis, 0)
        acc = x[0]
        for i in range(1, x.shape[0]):
            acc = self.add(acc, x[i])
        return self._finish(np.asarray(acc), a)


def perturb(x, ctx: RRContext):
    """Random Rounding post-operation hook: ``round(inexact(x))``.

    IEEE mode and exact zeros, infinities and NaNs pass through unchanged.
    """
    return ctx.perturb(x)


class RRScalar:
    """A binary64 value whose arithmetic operators route through a context."""

    __slots__ = ("value", "ctx")

    def __init__(self, value: float, ctx: RRContext) -> None:
        self.value = float(value)
        self.ctx = ctx

    def _v(self, other) -> float:
        return other.value if isinstance(other, RRScalar) else float(other)

    def _new(self, v) -> "RRScalar":
        return RRScalar(float(v), self.ctx)

    def __add__(self, other):
        return self._new(self.ctx.add(self.value, self._v(other)))

    def __radd__(self, other):
        return self._new(self.ctx.add(self._v(other), self.value))

    def __sub__(self, other):
        return self._new(self.ctx.sub(self.value, self._v(other)))

    def __rsub__(self, other):
        return self._new(self.ctx.sub(self._v(other), self.value))

    def __mul__(self, other):
        return self._new(self.ctx.mul(self.value, self._v(other)))

    def __rmul__(self, other):
        return self._new(self.ctx.mul(self._v(other), self.value))

    def __truediv__(self, other):
        return self._new(self.ctx.div(self.value, self._v(other)))

    def __rtruediv__(self, other):
        return self._new(self.ctx.div(self._v(other), self.value))

    def __neg__(self):
        return self._new(-self.value)

    def sqrt(self) -> "RRScalar":
        return self._new(self.ctx.sqrt(self.value))

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        return f"RRScalar({self.value!r})"
