"""Differentiable operators.

Elementwise arithmetic broadcasts like numpy; gradients are summed back to
the operand shapes.  The heavier primitives (linear, conv1d, layer_norm,
gelu, softmax, cross-entropy) have fused backward passes.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from spkid.errors import (
    AllFramesInvalid,
    BadTarget,
    InputTooShort,
    NonPositiveWeight,
    ShapeMismatch,
)
from spkid.numcore.tensor import Tensor, as_tensor, get_dtype, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def _const(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else get_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b):
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a):
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------- reductions & shape


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1, ax2):
    return make_result(np.swapaxes(a.data, ax1, ax2), (a,),
                       lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, index):
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    if isinstance(index, np.ndarray) and index.dtype == bool:
        index = np.nonzero(index)
    out = a.data[index]
    fancy = _is_fancy(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_result(np.array(out, copy=True), (a,), backward)


def _is_fancy(index):
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def take_rows(table, idx):
    """Gather rows ``table[idx]`` along axis 0 (embedding lookup)."""
    idx = np.asarray(idx)
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return make_result(out, (table,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis),
                       tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(np.stack([t.data for t in tensors], axis=axis),
                       tuple(tensors), backward)


def matmul(a, b):
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands need ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------- layers


def linear(x, W, b=None):
    """``y = x W + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape} vs W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeMismatch(f"linear: bias {b.shape} vs W {W.shape}")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g @ W.data.T) if x.requires_grad else None
        gW = (x.data.reshape(-1, W.shape[0]).T @ g2) if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return make_result(out, parents, backward)


def conv1d_time_major(x, K, stride=1):
    """Valid cross-correlation on time-major input.

    ``x`` is ``[..., time, channels_in]`` and ``K`` is
    ``[channels_out, channels_in, width]``; the result is
    ``[..., time_out, channels_out]``.
    """
    x = as_tensor(x)
    if K.ndim != 3 or x.ndim < 2 or x.shape[-1] != K.shape[1]:
        raise ShapeMismatch(f"conv1d: x {x.shape} vs K {K.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_out, c_in, width = K.shape
    t_in = x.shape[-2]
    if t_in < width:
        raise InputTooShort(f"conv1d: time {t_in} < kernel width {width}")
    t_out = (t_in - width) // stride + 1
    lead = x.shape[:-2]
    xd = np.ascontiguousarray(x.data).reshape(-1, t_in, c_in)
    n = xd.shape[0]
    sn, st, sc = xd.strides
    windows = as_strided(xd, shape=(n, t_out, width, c_in),
                         strides=(sn, st * stride, st, sc), writeable=False)
    cols = windows.reshape(n * t_out, width * c_in)
    kmat = K.data.transpose(2, 1, 0).reshape(width * c_in, c_out)
    out = (cols @ kmat).reshape(*lead, t_out, c_out)

    def backward(g):
        g2 = g.reshape(n * t_out, c_out)
        gK = None
        if K.requires_grad:
            gK = (cols.T @ g2).reshape(width, c_in, c_out).transpose(2, 1, 0)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, t_out, width, c_in)
            gx = np.zeros((n, t_in, c_in), dtype=g.dtype)
            span = stride * (t_out - 1) + 1
            for w in range(width):
                gx[:, w:w + span:stride, :] += gcols[:, :, w, :]
            gx = gx.reshape(x.shape)
        return gx, gK

    return make_result(out, (x, K), backward)


def conv1d(x, K, stride=1):
    """Valid cross-correlation with ``x`` as ``[..., channels_in, time]``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeMismatch("conv1d input needs [channels, time]")
    y = conv1d_time_major(swapaxes(x, -1, -2), K, stride)
    return swapaxes(y, -1, -2)


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    xsq = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * xsq * xd))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xsq)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return make_result(out, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def _softmax_np(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    x = as_tensor(x)
    out = _softmax_np(x.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def weighted_cross_entropy(logits, targets, weights=None):
    """Weighted mean of per-row cross-entropy.

    ``loss = sum_i w[t_i] * -log softmax(logits_i)[t_i] / sum_i w[t_i]``.
    ``weights=None`` means all ones.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [batch, C], got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ShapeMismatch(f"{targets.shape[0]} targets for {n} rows")
    if n == 0:
        raise ShapeMismatch("empty batch")
    if np.any(targets < 0) or np.any(targets >= c):
        raise BadTarget(f"targets must lie in 0..{c - 1}")
    if weights is None:
        w = np.ones(c, dtype=logits.data.dtype)
    else:
        w = np.asarray(weights.data if isinstance(weights, Tensor) else weights,
                       dtype=logits.data.dtype)
        if w.shape != (c,):
            raise ShapeMismatch(f"weights {w.shape} for {c} classes")
        if np.any(w <= 0):
            raise NonPositiveWeight("class weights must be positive")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    wi = w[targets]
    total = wi.sum()
    loss = -(wi * logp[rows, targets]).sum() / total

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p * (wi / total)[:, None],)

    return make_result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def cosine_similarity(a, b, eps=1e-8):
    """Cosine similarity along the last axis (broadcasting over the rest)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatch(f"cosine_similarity: {a.shape} vs {b.shape}")
    na_raw = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb_raw = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    na = np.maximum(na_raw, eps)
    nb = np.maximum(nb_raw, eps)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    sim = dot / (na * nb)

    def backward(g):
        g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            term = b.data / (na * nb)
            term = term - np.where(na_raw > eps, sim * a.data / (na * na), 0.0)
            ga = unbroadcast(g * term, a.shape)
        if b.requires_grad:
            term = a.data / (na * nb)
            term = term - np.where(nb_raw > eps, sim * b.data / (nb * nb), 0.0)
            gb = unbroadcast(g * term, b.shape)
        return ga, gb

    return make_result(sim[..., 0], (a, b), backward)


def mean_pool(x, valid_mask):
    """Average ``x[..., T, d]`` over the frames where ``valid_mask[..., T]`` is set."""
    x = as_tensor(x)
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeMismatch(f"mask {mask.shape} for frames {x.shape}")
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise AllFramesInvalid("mean_pool needs at least one valid frame")
    w = (mask / counts).astype(x.data.dtype)[..., None]
    out = (x.data * w).sum(axis=-2)

    def backward(g):
        return (g[..., None, :] * w,)

    return make_result(out, (x,), backward)


def gumbel_softmax(logits, temperature=1.0, seed=None, hard=False, noise=True):
    """Gumbel-softmax sample over the last axis.

    ``seed`` may be an int or a ``numpy.random.Generator``.  ``noise=False``
    drops the Gumbel perturbation.  With ``hard`` the forward value is the
    one-hot argmax and the backward pass uses the soft sample
    (straight-through).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = as_tensor(logits)
    if noise:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        u = rng.random(logits.shape)
        gumbel = -np.log(-np.log(np.clip(u, 1e-20, 1.0 - 1e-12)))
        z = (logits.data + gumbel) / temperature
    else:
        z = logits.data / temperature
    soft = _softmax_np(z).astype(logits.data.dtype)
    if hard:
        idx = soft.argmax(axis=-1)
        out = np.zeros_like(soft)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    else:
        out = soft

    def backward(g):
        return (soft * (g - (g * soft).sum(axis=-1, keepdims=True)) / temperature,)

    return make_result(out, (logits,), backward)
