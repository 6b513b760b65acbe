"""Differentiable primitives over :class:`~ssmrec.numerics.tensor.Tensor`.

Broadcasting: ``add``, ``sub``, ``mul``, ``div`` and ``where`` follow numpy
broadcasting and reduce gradients back to each operand's shape. ``matmul``
broadcasts leading (batch) dimensions only. All other primitives require the
shapes documented on them and raise :class:`~ssmrec.errors.ShapeError`
otherwise.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, record

_GELU_C = np.sqrt(2.0 / np.pi)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise binary

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out.data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    return record(out, (x,), lambda g: (-g,))


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``mask`` is true, the constant ``fill`` elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ShapeError(f"where: mask {mask.shape} and input {x.shape} do not broadcast") from None
    out = Tensor(np.where(mask, x.data, np.asarray(fill, dtype=x.dtype)))
    return record(out, (x,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), x.shape),))


# ---------------------------------------------------------------- matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record(out, (a, b), backward)


# ---------------------------------------------------------------- elementwise unary

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return record(out, (x,), lambda g: (g * out.data,))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return record(out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))
    return record(out, (x,), lambda g: (g * 0.5 / out.data,))


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    return record(out, (x,), lambda g: (g * (1.0 - out.data * out.data),))


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid(x.data))
    return record(out, (x,), lambda g: (g * out.data * (1.0 - out.data),))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) in the overflow-free form max(x, 0) + ln(1 + e^-|x|)."""
    out = Tensor(_softplus(x.data))
    return record(out, (x,), lambda g: (g * _sigmoid(x.data),))


def log_sigmoid(x: Tensor) -> Tensor:
    out = Tensor(-_softplus(-x.data))
    return record(out, (x,), lambda g: (g * _sigmoid(-x.data),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(x.data * s)

    def backward(g):
        s = _sigmoid(x.data)
        return (g * (s + x.data * s * (1.0 - s)),)

    return record(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU (smooth everywhere, unlike ReLU)."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd**3))
    out = Tensor(0.5 * xd * (1.0 + t))

    def backward(g):
        t = np.tanh(_GELU_C * (xd + 0.044715 * xd**3))
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return record(out, (x,), backward)


# ---------------------------------------------------------------- reductions and shape

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return record(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    out = Tensor(data)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b))
    return record(out, (x,), lambda g: (np.swapaxes(g, a, b),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice, np.integer)) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = Tensor(np.array(x.data[index], copy=True))
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return record(out, (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    out = Tensor(data)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tuple(tensors), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``; output shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record(out, (table,), backward)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def backward(g):
        y = out.data
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = Tensor(x.data - lse)

    def backward(g):
        return (g - np.exp(out.data) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        gxh = g * gamma.data
        gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True)
                     - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), backward)


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """Scale-only normalisation; maps the zero vector to exactly zero."""
    d = x.shape[-1]
    if gamma.shape != (d,):
        raise ShapeError(f"rms_norm: gamma {gamma.shape} vs input {x.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    out = Tensor(xhat * gamma.data)

    def backward(g):
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gxh = g * gamma.data
        gx = r * (gxh - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma

    return record(out, (x, gamma), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = Tensor(x.data / denom)

    def backward(g):
        y = out.data
        active = norm > eps
        proj = np.where(active, np.sum(g * y, axis=axis, keepdims=True), 0.0)
        return ((g - y * proj) / denom,)

    return record(out, (x,), backward)


# ---------------------------------------------------------------- convolution

def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise causal convolution along the time axis.

    ``x`` is ``[..., L, D]`` and ``kernel`` is ``[D, W]``;
    ``out[t, d] = sum_w kernel[d, w] * x[t - W + 1 + w, d]`` with zeros before
    the sequence start. No bias.
    """
    if x.ndim < 2 or kernel.ndim != 2 or kernel.shape[0] != x.shape[-1]:
        raise ShapeError(f"causal_conv1d: input {x.shape} vs kernel {kernel.shape}")
    L = x.shape[-2]
    W = kernel.shape[1]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (W - 1, 0)
    xp = np.pad(x.data, pad)
    k = kernel.data
    acc = np.zeros(x.shape, dtype=np.result_type(x.dtype, kernel.dtype))
    for w in range(W):
        acc += k[:, w] * xp[..., w:w + L, :]
    out = Tensor(acc)

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for w in range(W):
                gxp[..., w:w + L, :] += g * k[:, w]
            gx = gxp[..., W - 1:, :]
        if kernel.requires_grad:
            gk = np.empty_like(k)
            d = k.shape[0]
            gflat = g.reshape(-1, d)
            for w in range(W):
                gk[:, w] = np.einsum("id,id->d", gflat, xp[..., w:w + L, :].reshape(-1, d))
        return gx, gk

    return record(out, (x, kernel), backward)
