"""Differentiable operations on :class:`~mhgd.tensor.Tensor`.

Image tensors use NHWC layout and convolution kernels are ``kH x kW x C_in x C_out``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    NumericalError,
    Tensor,
    as_tensor,
    checked_mode,
    make_result,
)

NORM_FLOOR = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "add")
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "sub")
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_binary(a, b, "mul")
    return make_result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape),
                                  _unbroadcast(g * a.data, b.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * x.data.dtype.type(c), (x,),
                       lambda g: (g * g.dtype.type(c),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                       lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if checked_mode() and np.any(x.data <= 0):
        raise NumericalError("log of non-positive value")
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return make_result(y, (x,), lambda g: (g / x.data,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data >= floor
    y = np.where(mask, x.data, floor).astype(x.dtype)
    return make_result(y, (x,), lambda g: (g * mask,), "clamp_min")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_result(np.asarray(y, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis, keepdims), 1.0 / count)


# -- structural ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)
    return make_result(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    y = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return make_result(np.ascontiguousarray(y), (x,),
                       lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    y = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return make_result(y, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    y = np.stack([x.data for x in xs], axis=axis)
    n = len(xs)
    return make_result(y, tuple(xs),
                       lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def detach(x: Tensor) -> Tensor:
    return x.detach()


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    y = a.data @ b.data
    return make_result(y, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- convolution and pooling ---------------------------------------------------

def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NHWC batch with a ``kH x kW x C_in x C_out`` kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    n, h, wd, _ = x.shape
    kh, kw, cin, cout = w.shape
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                             f"{h + 2 * padding}x{wd + 2 * padding}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x.dtype, w.dtype))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + hs:stride, j:j + ws:stride, :] @ w.data[i, j]

    def backward(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        flat_g = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                window = xp[:, i:i + hs:stride, j:j + ws:stride, :]
                gw[i, j] = window.reshape(-1, cin).T @ flat_g
                gxp[:, i:i + hs:stride, j:j + ws:stride, :] += g @ w.data[i, j].T
        gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        return np.ascontiguousarray(gx), gw

    return make_result(out, (x, w), backward, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum; gradient goes to the first maximal entry in row-major order."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ContractError("maxpool2d: window and stride must be >= 1")
    n, h, wd, c = x.shape
    if window > h or window > wd:
        raise DimensionError(f"maxpool2d: window {window} exceeds input extent {h}x{wd}")
    ho, wo = _out_size(h, window, stride, 0), _out_size(wd, window, stride, 0)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    best = None
    arg = np.zeros((n, ho, wo, c), dtype=np.int32)
    k = 0
    for i in range(window):
        for j in range(window):
            view = x.data[:, i:i + hs:stride, j:j + ws:stride, :]
            if best is None:
                best = view.copy()
            else:
                better = view > best
                best = np.where(better, view, best)
                arg[better] = k
            k += 1

    def backward(g):
        gx = np.zeros_like(x.data)
        k = 0
        for i in range(window):
            for j in range(window):
                gx[:, i:i + hs:stride, j:j + ws:stride, :] += np.where(arg == k, g, 0)
                k += 1
        return (gx,)

    return make_result(best, (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    return mean(reshape(x, (n, h * w, c)), axis=1)


# -- normalisation ------------------------------------------------------------

BN_EPS = 1e-5
BN_DECAY = 0.9


def batch_norm(x: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor], eps: float = BN_EPS,
               mode: str = "batch", running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None, decay: float = BN_DECAY) -> Tensor:
    """Normalise over every axis but the last.

    ``mode="batch"`` uses batch statistics and, if running buffers are given,
    updates them in place as ``r <- decay * r + (1 - decay) * batch_stat``.
    ``mode="running"`` normalises with the running buffers.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "batch":
        if x.shape[0] < 2:
            raise ContractError("batch_norm: batch statistics need a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= decay
            running_mean += (1 - decay) * mu
        if running_var is not None:
            running_var *= decay
            running_var += (1 - decay) * var
    elif mode == "running":
        if running_mean is None or running_var is None:
            raise ContractError("batch_norm: running mode needs running statistics")
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    else:
        raise ContractError(f"batch_norm: unknown mode {mode!r}")

    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu) * inv
    g_data = 1 if gamma is None else gamma.data
    b_data = 0 if beta is None else beta.data
    y = (xhat * g_data + b_data).astype(x.dtype)
    count = x.data.size // x.shape[-1]
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g):
        gxhat = g * g_data
        if mode == "batch":
            gx = inv / count * (count * gxhat - gxhat.sum(axis=axes)
                                - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        grads = [gx.astype(x.dtype)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes).astype(gamma.dtype))
        if beta is not None:
            grads.append(g.sum(axis=axes).astype(beta.dtype))
        return grads

    return make_result(y, parents, backward, "batch_norm")


def softmax_rows(s: Tensor) -> Tensor:
    z = s.data - s.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_result(y, (s,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
                       "softmax_rows")


def log_softmax_rows(s: Tensor) -> Tensor:
    z = s.data - s.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_result(y, (s,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),),
                       "log_softmax_rows")


def l2_normalize_rows(v: Tensor) -> Tensor:
    x = v.data.astype(np.float64)
    norms = np.sqrt((x ** 2).sum(axis=-1, keepdims=True))
    if checked_mode() and np.any(norms < NORM_FLOOR):
        raise NumericalError("l2_normalize_rows: zero row encountered")
    denom = np.maximum(norms, NORM_FLOOR)
    # Divide at 64-bit and round once, so a second pass stays within an ulp.
    y = (x / denom).astype(v.dtype)
    live = norms >= NORM_FLOOR

    def backward(g):
        proj = np.where(live, (g * y).sum(axis=-1, keepdims=True), 0)
        return (((g - y * proj) / denom).astype(g.dtype),)

    return make_result(y, (v,), backward, "l2_normalize_rows")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels "
                             f"for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def kl_rows(p: Tensor, q: Tensor, floor: float = 1e-12) -> Tensor:
    """Sum over all entries of ``p * (log p - log q)`` with ``q`` treated as constant."""
    q_log = np.log(np.maximum(q.data, floor))
    lp = log(clamp_min(p, floor))
    return sum(mul(p, sub(lp, Tensor(q_log, dtype=p.dtype))))

