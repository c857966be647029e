"""Differentiable operations on :class:`Tensor`.

Image tensors are channels-last, ``(B, H, W, C)``.  Every op returns a new
tensor; none mutate their inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, make_result

_GELU_C = math.sqrt(2.0 / math.pi)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _lift(b, a)
    else:
        a = _lift(a, b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)
    return make_result(x.data * s, (x,), lambda g: (g * s,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only where the input was inside the range."""
    out = np.clip(x.data, lo, hi)

    def backward(g):
        return (g * (out == x.data),)

    return make_result(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    xd = x.data
    dt = xd.dtype.type
    x2 = xd * xd
    t = x2 * dt(0.044715 * _GELU_C)
    t += dt(_GELU_C)
    t *= xd
    np.tanh(t, out=t)
    out = t + dt(1.0)
    out *= xd
    out *= dt(0.5)

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
        d = x2 * dt(3.0 * 0.044715 * _GELU_C)
        d += dt(_GELU_C)
        d *= xd
        sech2 = t * t
        np.subtract(dt(1.0), sech2, out=sech2)
        d *= sech2
        d += t
        d += dt(1.0)
        d *= dt(0.5)
        d *= g
        return (d,)

    return make_result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


# -- reductions and shape --------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    out = np.transpose(x.data, axes)
    return make_result(out, (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_result(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    dtype = tensors[0].dtype
    if any(t.dtype != dtype for t in tensors):
        raise TypeError("concat requires a single dtype")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tuple(tensors), backward)


def pad_hw(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the bottom/right of a ``(B, H, W, C)`` tensor."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[1], x.shape[2]
    out = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)))
    return make_result(out, (x,), lambda g: (g[:, :h, :w, :],))


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather ``x`` along ``axis`` with an integer index array of any shape."""
    axis = axis % x.ndim
    index = np.asarray(index, dtype=np.intp)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        # scatter-add: sort the flat indices once, then sum runs of equal targets
        flat = index.reshape(-1)
        order = np.argsort(flat, kind="stable")
        targets, starts = np.unique(flat[order], return_index=True)
        lead, rest = x.shape[:axis], x.shape[axis + 1:]
        g = g.reshape(lead + (flat.size,) + rest)
        summed = np.add.reduceat(np.take(g, order, axis=axis), starts, axis=axis)
        gx = np.zeros_like(x.data)
        gx[(slice(None),) * axis + (targets,)] = summed
        return (gx,)

    return make_result(out, (x,), backward)


def pick(x: Tensor, labels: np.ndarray) -> Tensor:
    """``out[...] = x[..., labels[...]]`` along the last axis."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != x.shape[:-1]:
        raise DimensionError(f"labels {labels.shape} do not match {x.shape[:-1]}")
    idx = labels[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return make_result(out, (x,), backward)


# -- linear algebra --------------------------------------------------------

def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.matmul(_swap_last(a.data), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if x.dtype != weight.dtype:
        raise TypeError(f"dtype mismatch: {x.dtype} vs {weight.dtype}")
    k, n = weight.shape
    flat = x.data.reshape(-1, k)
    out = flat @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (n,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, backward)


# -- normalisation ---------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layernorm affine params must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = rstd * (gxhat - m1 - xhat * m2)
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


# -- image ops -------------------------------------------------------------

def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def unfold(x: Tensor, k: int, s: int, p: int) -> Tensor:
    """Extract ``k x k`` patches (im2col) from a channels-last image.

    Input ``(B, H, W, C)`` or ``(H, W, C)``; output ``(..., H', W', k*k*C)``
    with patch entries ordered (row, col, channel).  Out-of-bounds reads are
    zero.  A following linear map of shape ``(k*k*C, C_out)`` is exactly a
    strided convolution.
    """
    if k < 1 or s < 1 or p < 0:
        raise DimensionError(f"invalid unfold parameters k={k} s={s} p={p}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, h, w, c = xd.shape
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise DimensionError(f"unfold of {h}x{w} with k={k} s={s} p={p} is empty")
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    cols = np.empty((b, ho, wo, k, k, c), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    out = cols.reshape(b, ho, wo, k * k * c)
    if squeeze:
        out = out[0]

    def backward(g):
        g6 = g.reshape(b, ho, wo, k, k, c)
        gp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gp[:, i:i + s * ho:s, j:j + s * wo:s, :] += g6[:, :, :, i, j, :]
        gx = gp[:, p:p + h, p:p + w, :]
        return (gx[0] if squeeze else np.ascontiguousarray(gx),)

    return make_result(out, (x,), backward)


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear-interpolation weights, ``align_corners=False`` convention."""
    r = np.zeros((n_out, n_in), dtype=dtype)
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        r[o, i0] += 1.0 - frac
        r[o, i1] += frac
    return r


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``(B, H, W, C)`` with half-pixel centres."""
    b, h, w, c = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = resize_matrix(h, out_h, x.dtype)
    rx = resize_matrix(w, out_w, x.dtype)
    tmp = np.matmul(ry, x.data.reshape(b, h, w * c))              # (b, out_h, w*c)
    out = np.matmul(rx, tmp.reshape(b * out_h, w, c))              # (b*out_h, out_w, c)
    out = out.reshape(b, out_h, out_w, c)

    def backward(g):
        gt = np.matmul(rx.T, g.reshape(b * out_h, out_w, c))       # (b*out_h, w, c)
        gx = np.matmul(ry.T, gt.reshape(b, out_h, w * c))
        return (gx.reshape(b, h, w, c),)

    return make_result(out, (x,), backward)


def avg_pool(x: Tensor, r: int) -> Tensor:
    """Non-overlapping ``r x r`` average pooling; pads bottom/right with zeros."""
    if r == 1:
        return x
    b, h, w, c = x.shape
    x = pad_hw(x, (-h) % r, (-w) % r)
    hp, wp = x.shape[1], x.shape[2]
    return mean(reshape(x, (b, hp // r, r, wp // r, r, c)), axis=(2, 4))
