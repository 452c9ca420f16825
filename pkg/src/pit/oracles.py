"""Independent reference implementations used by the test suite.

Everything here is written as plain double-precision loop nests on numpy
arrays, deliberately sharing no code with the engine modules it checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray,
                step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, double precision."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(x))
        flat[i] = orig - step
        f_minus = float(f(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def reference_conv(x: np.ndarray, w: np.ndarray, bias=None,
                   stride: int = 1, dilation: int = 1) -> np.ndarray:
    """Naive causal dilated conv: y[b,m,t] = sum_{l,i} x[b,l,t*s - d*i] w[m,l,i].

    Out-of-range (negative) input indices contribute zero. x: [B,C_in,T],
    w: [C_out,C_in,K]. Quadruple loop, float64 throughout.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b_n, c_in, t_in = x.shape
    c_out, _, k = w.shape
    t_out = (t_in + stride - 1) // stride
    y = np.zeros((b_n, c_out, t_out), dtype=np.float64)
    for b in range(b_n):
        for m in range(c_out):
            for t in range(t_out):
                acc = 0.0
                for l in range(c_in):
                    for i in range(k):
                        src = t * stride - dilation * i
                        if src >= 0:
                            acc += x[b, l, src] * w[m, l, i]
                if bias is not None:
                    acc += float(bias[m])
                y[b, m, t] = acc
    return y


def shrunk_layer(w: np.ndarray, bias, kept_channels: Sequence[int],
                 f: int, d: int) -> tuple[np.ndarray, np.ndarray | None]:
    """Ground-truth slicing of a seed kernel to (kept channels, F, d).

    Returns (w_small, bias_small) where w_small[m', l, j] is the seed weight
    of output channel kept_channels[m'] at lag d*j, for lags 0, d, ..., F-1.
    Built with explicit loops, independent of the export module.
    """
    w = np.asarray(w)
    if f < 1 or d < 1 or (f - 1) % d != 0:
        raise ValueError(f"invalid shrink target F={f}, d={d}")
    k_small = (f - 1) // d + 1
    c_in = w.shape[1]
    w_small = np.zeros((len(kept_channels), c_in, k_small), dtype=w.dtype)
    for mi, m in enumerate(kept_channels):
        for l in range(c_in):
            for j in range(k_small):
                w_small[mi, l, j] = w[m, l, d * j]
    if bias is None:
        return w_small, None
    bias = np.asarray(bias)
    b_small = np.zeros(len(kept_channels), dtype=bias.dtype)
    for mi, m in enumerate(kept_channels):
        b_small[mi] = bias[m]
    return w_small, b_small


def dominance_bruteforce(points: Sequence, metric_of: Callable, cost_of: Callable,
                         higher_is_better: bool) -> list:
    """O(n^2) non-dominated filter.

    p dominates q iff p's metric is better-or-equal and p's cost is strictly
    lower. Among points with identical (metric, cost), only the earliest
    survives.
    """
    kept = []
    for qi, q in enumerate(points):
        dominated = False
        for pi, p in enumerate(points):
            if pi == qi:
                continue
            pm, qm = metric_of(p), metric_of(q)
            better_or_equal = pm >= qm if higher_is_better else pm <= qm
            if better_or_equal and cost_of(p) < cost_of(q):
                dominated = True
                break
            if pm == qm and cost_of(p) == cost_of(q) and pi < qi:
                dominated = True
                break
        if not dominated:
            kept.append(q)
    return kept
