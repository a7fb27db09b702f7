"""Naive per-element reference implementations with the documented sum orders."""

import itertools
import math

import numpy as np


def naive_conv(x, kernel, bias):
    """Same-padded cross-correlation: bias, then taps row-major, channels inner."""
    c_out, c_in, *ks = kernel.shape
    d = len(ks)
    rest = x.shape[1:]
    spatial = rest[-d:]
    out = np.zeros((c_out,) + rest)
    for co in range(c_out):
        for pos in np.ndindex(rest):
            batch, where = pos[:len(rest) - d], pos[len(rest) - d:]
            acc = float(bias[co])
            for tap in itertools.product(*(range(k) for k in ks)):
                src = tuple(w + t - k // 2 for w, t, k in zip(where, tap, ks))
                for ci in range(c_in):
                    inside = all(0 <= s < n for s, n in zip(src, spatial))
                    v = float(x[(ci,) + batch + src]) if inside else 0.0
                    acc = acc + float(kernel[(co, ci) + tap]) * v
            out[(co,) + pos] = acc
    return out


def naive_resample(image, warp):
    """Multilinear lookup at x + u(x), clamped, corners in row-major order."""
    d = warp.shape[0]
    spatial = warp.shape[1:]
    out = np.zeros(image.shape)
    lead = image.shape[:-d]
    for pos in np.ndindex(spatial):
        i0, i1, lo, hi = [], [], [], []
        for a in range(d):
            n = spatial[a]
            p = float(pos[a]) + float(warp[(a,) + pos])
            p = min(max(p, 0.0), float(n - 1))
            base = min(int(math.floor(p)), max(n - 2, 0))
            i0.append(base)
            i1.append(min(base + 1, n - 1))
            f = p - float(base)
            hi.append(f)
            lo.append(1.0 - f)
        for l in np.ndindex(lead) if lead else [()]:
            acc = None
            for corner in itertools.product((0, 1), repeat=d):
                w = None
                idx = []
                for a, c in enumerate(corner):
                    wa = hi[a] if c else lo[a]
                    w = wa if w is None else w * wa
                    idx.append(i1[a] if c else i0[a])
                term = w * float(image[tuple(l) + tuple(idx)])
                acc = term if acc is None else acc + term
            out[tuple(l) + pos] = acc
    return out
