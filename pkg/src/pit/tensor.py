"""Minimal deterministic tensor engine with reverse-mode autodiff.

Covers exactly the operations a masked TCN needs: dilated causal conv1d,
linear, batchnorm1d, avgpool1d, dropout, relu, residual add, losses, the
straight-through Heaviside, and a handful of scaling/reshaping primitives.
Storage is float32 by default (float64 when requested, e.g. for gradient
checks); kernels accumulate in float64 either way.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    # float ndarrays keep their precision; everything else becomes float32
    if isinstance(data, np.ndarray) and data.dtype in _ALLOWED:
        return data
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """Dense n-d array with an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 name: Optional[str] = None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar for scalar/same-shape arithmetic used by the loss assembly
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return cmul(self, other)

    __rmul__ = __mul__


def _non_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Ordered record of primitive ops; replayed in reverse for backward.

    Ops record themselves onto the innermost active tape. Outside any tape
    (evaluation), no graph is kept.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.pop()

    def _record(self, out: Tensor, backward_fn, inputs: Sequence[Tensor]) -> None:
        self._nodes.append((out, backward_fn))
        self._watched.append(out)
        for t in inputs:
            if t.requires_grad:
                self._watched.append(t)

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor this tape touched."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        _accum(loss, np.ones_like(loss.data))
        for out, fn in reversed(self._nodes):
            if out.grad is None:
                continue
            fn(out.grad)
        for t in self._watched:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def clear(self) -> None:
        self._nodes.clear()
        self._watched.clear()


_ACTIVE: list[Tape] = []


def _tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make_out(data: np.ndarray, backward_fn, inputs: Sequence[Tensor]) -> Tensor:
    tape = _tape()
    out_dtype = np.result_type(*[t.data.dtype for t in inputs])
    # 0-d arithmetic in numpy yields scalars; re-wrap so dtype survives.
    out = Tensor(np.asarray(data).astype(out_dtype, copy=False))
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(out, backward_fn, inputs)
    return out


# ---------------------------------------------------------------------------
# elementwise / shaping primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    data = a.data.astype(np.float64) + b.data.astype(np.float64)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make_out(data, backward, (a, b))


def add_const(a: Tensor, c) -> Tensor:
    data = a.data.astype(np.float64) + np.asarray(c, dtype=np.float64)

    def backward(g):
        _accum(a, g)

    return _make_out(data, backward, (a,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    data = a.data.astype(np.float64) * b.data.astype(np.float64)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make_out(data, backward, (a, b))


def cmul(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (no gradient into c)."""
    c_arr = np.asarray(c, dtype=np.float64)
    data = a.data.astype(np.float64) * c_arr

    def backward(g):
        _accum(a, g * c_arr)

    return _make_out(data, backward, (a,))


def cdiv(a: Tensor, c) -> Tensor:
    """Divide by a constant; kept separate from cmul so x/x is exactly 1."""
    c_arr = np.asarray(c, dtype=a.data.dtype)
    data = a.data / c_arr

    def backward(g):
        _accum(a, g / c_arr)

    return _make_out(data, backward, (a,))


def abs_(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward(g):
        # subgradient at 0 is taken as 0
        _accum(a, g * np.sign(a.data))

    return _make_out(data, backward, (a,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make_out(data, backward, (a,))


def sum_(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(dtype=np.float64))

    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _make_out(data, backward, (a,))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make_out(data, backward, (a,))


def flatten2d(a: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(...)]."""
    return reshape(a, (a.shape[0], -1))


def matvec(m, v: Tensor) -> Tensor:
    """Constant matrix times tensor vector: out_i = sum_j m[i,j] v[j]."""
    m_arr = np.asarray(m, dtype=np.float64)
    if v.ndim != 1 or m_arr.shape[1] != v.shape[0]:
        raise ValueError(f"matvec inner mismatch: {m_arr.shape} vs {v.shape}")
    data = m_arr @ v.data.astype(np.float64)

    def backward(g):
        _accum(v, m_arr.T @ g)

    return _make_out(data, backward, (v,))


def heaviside_ste(v: Tensor, th: float = 0.5) -> Tensor:
    """Forward: 1 where v >= th else 0. Backward: identity (straight-through)."""
    data = (v.data >= th).astype(v.data.dtype)

    def backward(g):
        _accum(v, g)

    return _make_out(data, backward, (v,))


# ---------------------------------------------------------------------------
# channel/tap scaling used by mask application


def scale_channels(x: Tensor, v: Tensor) -> Tensor:
    """x[B,C,T] * v[C] along the channel axis."""
    if x.ndim != 3 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ValueError(f"scale_channels shapes: {x.shape} vs {v.shape}")
    data = x.data.astype(np.float64) * v.data.astype(np.float64)[None, :, None]

    def backward(g):
        _accum(x, g * v.data[None, :, None])
        _accum(v, np.einsum("bct,bct->c", g, x.data.astype(np.float64)))

    return _make_out(data, backward, (x, v))


def scale_out_channels(w: Tensor, v: Tensor) -> Tensor:
    """w[C_out,C_in,K] * v[C_out]."""
    if w.ndim != 3 or v.ndim != 1 or w.shape[0] != v.shape[0]:
        raise ValueError(f"scale_out_channels shapes: {w.shape} vs {v.shape}")
    data = w.data.astype(np.float64) * v.data.astype(np.float64)[:, None, None]

    def backward(g):
        _accum(w, g * v.data[:, None, None])
        _accum(v, np.einsum("mlk,mlk->m", g, w.data.astype(np.float64)))

    return _make_out(data, backward, (w, v))


def scale_taps(w: Tensor, v: Tensor) -> Tensor:
    """w[C_out,C_in,K] * v[K]."""
    if w.ndim != 3 or v.ndim != 1 or w.shape[2] != v.shape[0]:
        raise ValueError(f"scale_taps shapes: {w.shape} vs {v.shape}")
    data = w.data.astype(np.float64) * v.data.astype(np.float64)[None, None, :]

    def backward(g):
        _accum(w, g * v.data[None, None, :])
        _accum(v, np.einsum("mlk,mlk->k", g, w.data.astype(np.float64)))

    return _make_out(data, backward, (w, v))


def embed_channels(x: Tensor, positions: Sequence[int], c_out: int) -> Tensor:
    """Scatter x[B,k,T] into zeros[B,c_out,T] at the given channel positions."""
    pos = np.asarray(positions, dtype=np.intp)
    if x.ndim != 3 or pos.shape[0] != x.shape[1]:
        raise ValueError(f"embed_channels shapes: {x.shape} vs {pos.shape[0]} positions")
    b, _, t = x.shape
    data = np.zeros((b, c_out, t), dtype=np.float64)
    data[:, pos, :] = x.data

    def backward(g):
        _accum(x, g[:, pos, :])

    return _make_out(data, backward, (x,))


# ---------------------------------------------------------------------------
# conv / linear / pooling / normalization


def _conv_indices(t_out: int, stride: int, dilation: int, k: int) -> np.ndarray:
    # idx[i, t] = position of tap i (lag d*i behind output step t) in the padded input
    t_grid = np.arange(t_out) * stride
    i_grid = dilation * (k - 1 - np.arange(k))
    return i_grid[:, None] + t_grid[None, :]


def conv1d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, dilation: int = 1) -> Tensor:
    """Causal dilated 1-d convolution.

    x: [B, C_in, T] or [C_in, T]; w: [C_out, C_in, K] with tap i reading the
    sample dilation*i steps in the past; left-pads dilation*(K-1) zeros so
    T_out = ceil(T / stride).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d needs [B,C,T] and [C_out,C_in,K], got {x.shape}, {w.shape}")
    b, c_in, t_in = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ValueError(f"conv1d channel mismatch: x has C_in={c_in}, w has C_in={c_in_w}")
    if k < 1 or t_in < 1 or stride < 1 or dilation < 1:
        raise ValueError("conv1d needs K, T, stride, dilation >= 1")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv1d bias shape {bias.shape} != ({c_out},)")

    pad = dilation * (k - 1)
    t_out = -(-t_in // stride)  # ceil
    xp = np.zeros((b, c_in, t_in + pad), dtype=np.float64)
    xp[:, :, pad:] = x.data
    idx = _conv_indices(t_out, stride, dilation, k)
    cols = xp[:, :, idx].reshape(b, c_in * k, t_out)  # [B, C_in*K, T_out]
    w2 = w.data.astype(np.float64).reshape(c_out, c_in * k)
    data = np.matmul(w2[None], cols)
    if bias is not None:
        data = data + bias.data.astype(np.float64)[None, :, None]

    def backward(g):
        g64 = g.astype(np.float64)
        dw = np.matmul(g64, cols.transpose(0, 2, 1)).sum(axis=0)
        _accum(w, dw.reshape(c_out, c_in, k))
        if bias is not None:
            _accum(bias, g64.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], g64).reshape(b, c_in, k, t_out)
            gxp = np.zeros_like(xp)
            # tap rows never collide (distinct strided positions per tap),
            # so K slice-adds replace an unbuffered scatter
            for i in range(k):
                off = dilation * (k - 1 - i)
                gxp[:, :, off:off + stride * t_out:stride] += gcols[:, :, i, :]
            _accum(x, gxp[:, :, pad:])

    inputs = (x, w) if bias is None else (x, w, bias)
    out = _make_out(data, backward, inputs)
    return reshape(out, out.shape[1:]) if squeeze else out


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[B,I] @ w[O,I]^T + bias[O]; accepts 1-d x as a single row."""
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear inner mismatch: x {x.shape}, w {w.shape}")
    if bias is not None and bias.shape != (w.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} != ({w.shape[0]},)")
    data = x.data.astype(np.float64) @ w.data.astype(np.float64).T
    if bias is not None:
        data = data + bias.data.astype(np.float64)[None, :]

    def backward(g):
        g64 = g.astype(np.float64)
        _accum(x, g64 @ w.data.astype(np.float64))
        _accum(w, g64.T @ x.data.astype(np.float64))
        if bias is not None:
            _accum(bias, g64.sum(axis=0))

    inputs = (x, w) if bias is None else (x, w, bias)
    out = _make_out(data, backward, inputs)
    return reshape(out, (out.shape[1],)) if squeeze else out


def avgpool1d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Non-padded average pooling along the last axis of x[B,C,T]."""
    stride = window if stride is None else stride
    if x.ndim != 3:
        raise ValueError(f"avgpool1d needs [B,C,T], got {x.shape}")
    t_in = x.shape[2]
    if window > t_in:
        raise ValueError(f"pool window {window} exceeds sequence length {t_in}")
    t_out = (t_in - window) // stride + 1
    starts = np.arange(t_out) * stride
    idx = starts[None, :] + np.arange(window)[:, None]  # [window, T_out]
    data = x.data.astype(np.float64)[:, :, idx].mean(axis=2)

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gw = g / window
        # one strided slice-add per window offset; offsets within a row are
        # distinct, so no scatter is needed
        for i in range(window):
            gx[:, :, i:i + stride * t_out:stride] += gw
        _accum(x, gx)

    return _make_out(data, backward, (x,))


class BatchNormState:
    """Running statistics and trainable affine for one batchnorm layer."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batchnorm1d(x: Tensor, state: BatchNormState, train_mode: bool) -> Tensor:
    """Per-channel batch normalization over [B,C,T].

    Train mode normalizes with batch statistics and updates the running
    stats off-tape; eval mode uses the running stats.
    """
    if x.ndim != 3 or x.shape[1] != state.scale.shape[0]:
        raise ValueError(f"batchnorm shapes: {x.shape} vs {state.scale.shape}")
    x64 = x.data.astype(np.float64)
    scale, shift = state.scale, state.shift
    if train_mode:
        mean = x64.mean(axis=(0, 2))
        var = x64.var(axis=(0, 2))
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x64 - mean[None, :, None]) * inv_std[None, :, None]
    data = scale.data.astype(np.float64)[None, :, None] * xhat \
        + shift.data.astype(np.float64)[None, :, None]

    def backward(g):
        g64 = g.astype(np.float64)
        _accum(scale, np.einsum("bct,bct->c", g64, xhat))
        _accum(shift, g64.sum(axis=(0, 2)))
        if not x.requires_grad:
            return
        gxhat = g64 * scale.data.astype(np.float64)[None, :, None]
        if train_mode:
            n = x.shape[0] * x.shape[2]
            sum_g = gxhat.sum(axis=(0, 2))
            sum_gx = np.einsum("bct,bct->c", gxhat, xhat)
            gx = (gxhat - (sum_g[None, :, None] + xhat * sum_gx[None, :, None]) / n) \
                * inv_std[None, :, None]
        else:
            gx = gxhat * inv_std[None, :, None]
        _accum(x, gx)

    return _make_out(data, backward, (x, scale, shift))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the Bernoulli mask is fixed for the backward pass."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
    data = x.data.astype(np.float64) * mask

    def backward(g):
        _accum(x, g * mask)

    return _make_out(data, backward, (x,))


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of logits[B,K] against integer labels[B]."""
    y = np.asarray(labels)
    if logits.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ValueError(f"cross-entropy shapes: {logits.shape} vs labels {y.shape}")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - logsumexp
    n = y.shape[0]
    data = np.asarray(-logp[np.arange(n), y].mean())

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        _accum(logits, float(g) * p / n)

    return _make_out(data, backward, (logits,))


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target array."""
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"mse shapes: {pred.shape} vs {t.shape}")
    diff = pred.data.astype(np.float64) - t
    data = np.asarray((diff ** 2).mean())

    def backward(g):
        _accum(pred, float(g) * 2.0 * diff / diff.size)

    return _make_out(data, backward, (pred,))


# ---------------------------------------------------------------------------
# optimizers


def adam_step(params: Iterable[Tensor], grads, state: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One Adam update, in place. state starts as {} and is keyed by position."""
    b1, b2 = betas
    t = state.get("t", 0) + 1
    state["t"] = t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = state.setdefault(("m", i), np.zeros(p.shape, dtype=np.float64))
        v = state.setdefault(("v", i), np.zeros(p.shape, dtype=np.float64))
        m[:] = b1 * m + (1 - b1) * g
        v[:] = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data = (p.data.astype(np.float64)
                  - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def sgd_step(params: Iterable[Tensor], grads, state: dict, lr: float,
             momentum: float = 0.0) -> None:
    """One SGD(+momentum) update, in place."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if momentum > 0.0:
            buf = state.setdefault(("mom", i), np.zeros(p.shape, dtype=np.float64))
            buf[:] = momentum * buf + g
            g = buf
        p.data = (p.data.astype(np.float64) - lr * g).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state: dict = {}

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.state: dict = {}

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.state,
                 self.lr, self.momentum)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator,
                    dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
