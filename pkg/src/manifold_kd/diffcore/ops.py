"""Differentiable primitives.

Every primitive checks its forward value for NaN/Inf and, when a tape is
active and an input requires a gradient, records an exact vector-Jacobian
product.  Shapes must match exactly; the only implicit broadcasting is with
Python scalars.  Row-vector broadcasts (bias, norm affine) go through
explicit primitives.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import NonFinite, ShapeMismatch
from .tensor import Tensor, active_tape, as_tensor


def _emit(name: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFinite(f"{name} produced non-finite values")
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _same_shape(name, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} differ")


def constant(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64, copy=True))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return _emit("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scalar_mul", a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("add_scalar", a.value + float(c), (a,), lambda g: (g,))


def matmul(a, b) -> Tensor:
    """``(..., n, k) @ (k, p)`` (shared right operand) or equal-batch ``@``."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    if bv.ndim == 2:
        out = av @ bv

        def vjp(g):
            ga = g @ bv.T
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        if av.shape[:-2] != bv.shape[:-2]:
            raise ShapeMismatch(f"matmul: batch dims {av.shape[:-2]} and {bv.shape[:-2]} differ")
        out = av @ bv

        def vjp(g):
            return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g
    return _emit("matmul", out, (a, b), vjp)


def bias_add(x, bias) -> Tensor:
    """Add a length-C vector to every row of ``(..., C)``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeMismatch(f"bias_add: {bias.shape} does not match last axis of {x.shape}")
    return _emit("bias_add", x.value + bias.value, (x, bias),
                 lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].ndim
    ax = axis % ref
    for t in ts:
        if t.ndim != ref or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.value for t in ts], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit("concat", out, ts, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _emit("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def max_reduce(x, axis: int) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.value, axis=ax), ax)
    out = np.take_along_axis(x.value, arg, axis=ax).squeeze(ax)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, arg, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _emit("max_reduce", out, (x,), vjp)


def sum_reduce(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _emit("sum_reduce", np.asarray(x.value.sum()), (x,),
                     lambda g: (np.full(shape, float(g)),))
    ax = axis % x.ndim
    return _emit("sum_reduce", x.value.sum(axis=ax), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean_reduce(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scalar_mul(sum_reduce(x, axis), 1.0 / n)


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``."""
    x = as_tensor(x)
    t = float(temperature)
    z = x.value / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / t,)

    return _emit("softmax_rows", s, (x,), vjp)


def log_softmax_rows(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    t = float(temperature)
    z = x.value / t
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return ((g - s * g.sum(axis=-1, keepdims=True)) / t,)

    return _emit("log_softmax_rows", out, (x,), vjp)


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(v)
    return _emit("log", out, (x,), lambda g: (g / v,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _emit("square", v * v, (x,), lambda g: (2.0 * v * g,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.value)
    return _emit("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def xlogx(x) -> Tensor:
    """``x * log(x)`` with the convention ``0 * log 0 = 0`` (x >= 0)."""
    x = as_tensor(x)
    v = x.value
    pos = v > 0
    safe = np.where(pos, v, 1.0)
    out = np.where(pos, v * np.log(safe), 0.0)
    return _emit("xlogx", out, (x,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),))


def soft_bins(u, centers, bandwidth: float) -> Tensor:
    """Gaussian soft assignment of every entry of ``u`` to 1-D bin centers.

    Output ``(..., bins)`` is the softmax over bins of
    ``-(u - c)^2 / (2 h^2)``.
    """
    u = as_tensor(u)
    c = np.asarray(centers, dtype=np.float64)
    h2 = float(bandwidth) ** 2
    d = u.value[..., None] - c
    z = -0.5 * d * d / h2
    z -= z.max(axis=-1, keepdims=True)
    s = np.exp(z)
    s /= s.sum(axis=-1, keepdims=True)

    def vjp(g):
        gz = s * (g - (g * s).sum(axis=-1, keepdims=True))
        return (-(gz * d).sum(axis=-1) / h2,)

    return _emit("soft_bins", s, (u,), vjp)


def gather(x, idx) -> Tensor:
    """Row gather with shared leading batch axes.

    ``x`` is ``(*B, n, C)`` and ``idx`` an integer array ``(*B, *R)``; the
    result is ``(*B, *R, C)`` with ``out[b, r] = x[b, idx[b, r]]``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    nb = x.ndim - 2
    if idx.shape[:nb] != x.shape[:nb]:
        raise ShapeMismatch(f"gather: index batch {idx.shape[:nb]} vs tensor batch {x.shape[:nb]}")
    n, c = x.shape[-2], x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("gather: index out of range")
    nbatch = int(np.prod(x.shape[:nb], dtype=np.int64))
    offs = (np.arange(nbatch) * n).reshape(x.shape[:nb] + (1,) * (idx.ndim - nb))
    flat = (idx + offs).reshape(-1)
    xf = x.value.reshape(-1, c)
    out = xf[flat].reshape(idx.shape + (c,))
    shape = x.shape

    def vjp(g):
        gx = np.zeros((nbatch * n, c))
        np.add.at(gx, flat, g.reshape(-1, c))
        return (gx.reshape(shape),)

    return _emit("gather", out, (x,), vjp)


def take(x, idx, axis: int) -> Tensor:
    """Select ``idx`` (1-D) along ``axis``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % x.ndim
    out = np.take(x.value, idx, axis=ax)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        # np.add.at handles repeated indices
        sl[ax] = idx
        np.add.at(gx, tuple(sl), g)
        return (gx,)

    return _emit("take", out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a1: int = -1, a2: int = -2) -> Tensor:
    x = as_tensor(x)
    return _emit("swapaxes", np.swapaxes(x.value, a1, a2), (x,),
                 lambda g: (np.swapaxes(g, a1, a2),))


def expand(x, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times along it."""
    x = as_tensor(x)
    ax = axis % (x.ndim + 1)
    out = np.repeat(np.expand_dims(x.value, ax), n, axis=ax)
    return _emit("expand", out, (x,), lambda g: (g.sum(axis=ax),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each row over its channels, then per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("layer_norm: affine parameters must have one entry per channel")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.value
    out = xhat * gv + beta.value

    def vjp(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, c)
        return dx, (g2 * xhat.reshape(-1, c)).sum(axis=0), g2.sum(axis=0)

    return _emit("layer_norm", out, (x, gamma, beta), vjp)


def softmax_kl_rows(zp, zq, temperature: float = 1.0) -> Tensor:
    """Row-wise ``KL(softmax(zp/T) || softmax(zq/T))`` over the last axis.

    Fused so that identical inputs give exactly zero value and gradients.
    """
    zp, zq = as_tensor(zp), as_tensor(zq)
    _same_shape("softmax_kl_rows", zp, zq)
    t = float(temperature)

    def logsm(z):
        z = z / t
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    lp, lq = logsm(zp.value), logsm(zq.value)
    p, q = np.exp(lp), np.exp(lq)
    diff = lp - lq
    kl = (p * diff).sum(axis=-1)

    def vjp(g):
        g = g[..., None]
        return g * p * (diff - kl[..., None]) / t, g * (q - p) / t

    return _emit("softmax_kl_rows", kl, (zp, zq), vjp)
