"""Differentiable primitives over :class:`Tensor`.

Each op computes its forward value with numpy and, when recording, a
closure returning one gradient per input. Broadcasting follows numpy.
"""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import NonFiniteError, Tensor, as_tensor, make


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_finite(op, *xs):
    for x in xs:
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteError(f"{op}: non-finite input")


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make(ad * bd, (a, b),
                lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make(ad @ bd, (a, b), backward, "matmul")


# ---------------------------------------------------------------- reductions and shape

def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape", check=False)


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose", check=False)


def _basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return builtins.all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    """Slicing / indexing (``slice`` in the primitive list)."""
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype
    basic = _basic_index(idx)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make(np.array(a.data[idx]), (a,), backward, "slice", check=False)


def concat(tensors, axis=-1):
    """Concatenate along ``axis`` (last by default)."""
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ValueError(f"concat: shape mismatch {ts[0].shape} vs {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat", check=False)


def cumsum(a, axis=-2):
    a = as_tensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


# ---------------------------------------------------------------- elementwise

def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    ad = a.data
    return make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def swish(a):
    """x * sigmoid(x)."""
    a = as_tensor(a)
    ad = a.data
    s = _sigmoid(ad)
    return make(ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),), "swish")


def sqrt(a):
    """Square root whose gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return make(out, (a,), backward, "sqrt")


# ---------------------------------------------------------------- normalisers

def softmax(a):
    a = as_tensor(a)
    _check_finite("softmax", a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make(out, (a,), backward, "softmax")


def masked_softmax(a, mask):
    """Softmax over the last axis restricted to ``mask`` (True = keep).

    Every row must keep at least one position.
    """
    a = as_tensor(a)
    _check_finite("masked_softmax", a)
    mask = np.broadcast_to(mask, a.shape)
    z = np.where(mask, a.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0).astype(a.data.dtype, copy=False)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make(out, (a,), backward, "masked_softmax")


def logsumexp(a):
    a = as_tensor(a)
    _check_finite("logsumexp", a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = e / s
    return make(out, (a,), lambda g: (g[..., None] * p,), "logsumexp")


def log_softmax(a):
    a = as_tensor(a)
    _check_finite("log_softmax", a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return make(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm: shape mismatch {x.shape} vs {gamma.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        gx_hat = g * gd
        n = xd.shape[-1]
        gx = rstd / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                         - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- sequence ops

def depthwise_conv1d(x, w, bias=None):
    """Causal depthwise convolution over time.

    ``x`` is ``(..., T, C)``, ``w`` is ``(K, C)``;
    ``out[t] = sum_k w[k] * x[t - K + 1 + k]`` with zeros before frame 0.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or w.shape[1] != x.shape[-1]:
        raise ValueError(f"depthwise_conv1d: shape mismatch {x.shape} vs {w.shape}")
    K = w.shape[0]
    T = x.shape[-2]
    xd, wd = x.data, w.data
    pad = [(0, 0)] * xd.ndim
    pad[-2] = (K - 1, 0)
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for k in range(K):
        out += wd[k] * xp[..., k:k + T, :]
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        lead = tuple(range(g.ndim - 1))
        for k in range(K):
            gxp[..., k:k + T, :] += g * wd[k]
            gw[k] = (g * xp[..., k:k + T, :]).sum(axis=lead)
        grads = [gxp[..., K - 1:, :], gw]
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make(out, parents, backward, "depthwise_conv1d")


def embedding(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: index out of range for table {table.shape}")
    shape, dtype = table.shape, table.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids, g)
        return (out,)

    return make(table.data[ids], (table,), backward, "embedding", check=False)


def stack_frames(x, n, stride):
    """Stack ``n`` consecutive frames every ``stride`` frames along axis -2.

    Trailing frames that do not fill a whole window are dropped.
    """
    x = as_tensor(x)
    T, d = x.shape[-2], x.shape[-1]
    count = (T - n) // stride + 1 if T >= n else 0
    if count <= 0:
        raise ValueError(f"stack_frames: need at least {n} frames, got shape {x.shape}")
    idx = np.arange(count)[:, None] * stride + np.arange(n)[None, :]
    lead = x.shape[:-2]
    out = x.data[..., idx, :].reshape(lead + (count, n * d))
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        g = g.reshape(lead + (count, n, d))
        gx = np.zeros(shape, dtype=dtype)
        for j in range(n):
            gx[..., idx[:, j], :] += g[..., :, j, :]
        return (gx,)

    return make(out, (x,), backward, "stack_frames", check=False)


def shift_time(x, shift):
    """``out[t] = x[t + shift]`` along axis -2, zero where out of range."""
    x = as_tensor(x)
    if shift == 0:
        return x
    T = x.shape[-2]
    out = np.zeros_like(x.data)
    s = builtins.min(abs(shift), T)

    def backward(g):
        gx = np.zeros_like(g)
        if shift > 0:
            gx[..., shift:, :] = g[..., :T - s, :]
        else:
            gx[..., :T - s, :] = g[..., s:, :]
        return (gx,)

    if shift > 0:
        out[..., :T - s, :] = x.data[..., s:, :]
    else:
        out[..., s:, :] = x.data[..., :T - s, :]
    return make(out, (x,), backward, "shift_time", check=False)


# ---------------------------------------------------------------- gradient routing

def stop_gradient(a):
    """Identity forward; zero adjoint into ``a``."""
    a = as_tensor(a)
    return make(a.data, (a,), lambda g: (None,), "stop_gradient", check=False)


def straight_through(value, source):
    """Forward ``value`` (a constant array); backward passes the gradient to ``source``."""
    source = as_tensor(source)
    value = np.asarray(value, dtype=source.data.dtype)
    if value.shape != source.shape:
        raise ValueError(f"straight_through: shape mismatch {value.shape} vs {source.shape}")
    return make(value, (source,), lambda g: (g,), "straight_through", check=False)
