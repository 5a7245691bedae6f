"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy or a kernel from
``kernels.active`` and registers a closure for the vector-Jacobian product.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeError
from . import kernels
from .tensor import Tensor, as_tensor, make_result

KL_EPS = 1e-9
NORM_EPS = 1e-5
COS_ZERO = 1e-12


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _pair(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return a, b


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(out, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")


def silu_mul(a: Tensor, b: Tensor) -> Tensor:
    """silu(a) * b, the gated feed-forward nonlinearity."""
    if a.shape != b.shape:
        raise ShapeError(f"silu_mul shapes differ: {a.shape} vs {b.shape}")
    k = kernels.active
    ad, bd = a.data, b.data
    out = k.silu_mul(ad, bd)
    return make_result(out, (a, b), lambda g: k.silu_mul_bwd(g, ad, bd), "silu_mul")


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # weight matmul: fold batch dims so the weight gradient is a single GEMM
        flat = ad.reshape(-1, ad.shape[-1])
        out = (flat @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_result(out, (a, b), bwd, "matmul")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_result(out, (a, b), bwd, "matmul")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DomainError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]
    wshape = weight.shape

    def bwd(g):
        gw = np.zeros(wshape, dtype=g.dtype)
        np.add.at(gw, ids.ravel(), g.reshape(-1, wshape[1]))
        return (gw,)

    return make_result(out, (weight,), bwd, "embedding")


# -- normalisation / attention ----------------------------------------------

def rmsnorm(x: Tensor, w: Tensor, eps: float = NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if w.shape != (d,):
        raise ShapeError(f"rmsnorm scale shape {w.shape} != ({d},)")
    k = kernels.active
    x2 = x.data.reshape(-1, d)
    y, rstd = k.rmsnorm(x2, w.data, eps)
    wd = w.data

    def bwd(g):
        dx, dw = k.rmsnorm_bwd(g.reshape(-1, d), x2, wd, rstd)
        return dx.reshape(x.shape), dw

    return make_result(y.reshape(x.shape), (x, w), bwd, "rmsnorm")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary encoding over the last axis of x: [..., T, head_dim]."""
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], x.shape[-1] // 2):
        raise ShapeError(f"rope tables {cos.shape} incompatible with {x.shape}")
    k = kernels.active
    out = k.rope(x.data, cos, sin)
    return make_result(out, (x,), lambda g: (k.rope(g, cos, sin, inverse=True),), "rope")


def causal_softmax(scores: Tensor, scale: float = 1.0) -> Tensor:
    """softmax(scale * scores) over the last axis with a lower-triangular
    mask; masked entries are exactly zero."""
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ShapeError(f"causal_softmax needs [..., T, T], got {scores.shape}")
    k = kernels.active
    probs = k.causal_softmax(scores.data, scale)
    return make_result(probs, (scores,), lambda g: (k.causal_softmax_bwd(probs, g, scale),), "causal_softmax")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, logits.ndim)
    x = logits.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (logits,), bwd, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, logits.ndim)
    x = logits.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (logits,), bwd, "log_softmax")


# -- reductions and losses --------------------------------------------------

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return make_result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)
    return make_result(out, (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over positions of -log softmax(logits)[target], in nats.
    logits: [..., V]; targets: integer array of shape logits.shape[:-1]."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} != logits batch shape {logits.shape[:-1]}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise DomainError("targets must be integer token ids")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise DomainError(f"target id out of range [0, {v})")
    k = kernels.active
    flat_t = targets.reshape(-1).astype(np.int64)
    nll, probs = k.cross_entropy_rows(logits.data.reshape(-1, v), flat_t)
    n = nll.shape[0]
    out = np.asarray(nll.sum(dtype=np.float64) / n, dtype=logits.dtype)

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), flat_t] -= 1
        d *= g / n
        return (d.reshape(logits.shape),)

    return make_result(out, (logits,), bwd, "cross_entropy")


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1, tol: float = 1e-5) -> Tensor:
    """Mean over slices along ``axis`` of sum p * (log p - log q).

    q is clamped below at 1e-9 before the log; 0 * log 0 is taken as 0.
    """
    p, q = _pair(p, q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p.shape} vs {q.shape}")
    axis = _check_axis(axis, p.ndim)
    pd, qd = p.data, q.data
    for name, arr in (("p", pd), ("q", qd)):
        s = arr.sum(axis=axis, dtype=np.float64)
        if np.max(np.abs(s - 1.0)) > tol or arr.min() < -tol:
            raise DomainError(f"{name} is not a distribution along axis {axis}")
    eps = pd.dtype.type(KL_EPS)
    qc = np.maximum(qd, eps)
    log_p = np.log(np.maximum(pd, eps))
    log_q = np.log(qc)
    terms = np.where(pd > 0, pd * (log_p - log_q), 0)
    n = pd.size // pd.shape[axis]
    out = np.asarray(terms.sum(dtype=np.float64) / n, dtype=pd.dtype)

    def bwd(g):
        c = g / n
        gp = gq = None
        if p.requires_grad:
            gp = np.where(pd > eps, log_p - log_q + 1, np.where(pd > 0, log_p - log_q, 0)) * c
        if q.requires_grad:
            gq = np.where(qd > eps, -pd / qc, 0) * c
        return gp, gq

    return make_result(out, (p, q), bwd, "kl_divergence")


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean over last-axis vectors of 1 - cos(a, b). A vector pair with a
    zero norm contributes 1 and no gradient."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_distance shapes differ: {a.shape} vs {b.shape}")
    d = a.shape[-1]
    ad = a.data.reshape(-1, d)
    bd = b.data.reshape(-1, d)
    na = np.sqrt((ad * ad).sum(axis=1))
    nb = np.sqrt((bd * bd).sum(axis=1))
    dot = (ad * bd).sum(axis=1)
    denom = na * nb
    ok = denom > COS_ZERO
    safe = np.where(ok, denom, 1)
    cos = np.clip(np.where(ok, dot / safe, 0), -1, 1)
    n = ad.shape[0]
    out = np.asarray((1 - cos).sum(dtype=np.float64) / n, dtype=a.dtype)

    def bwd(g):
        c = (g / n) * ok
        na_s = np.where(ok, na, 1)[:, None]
        nb_s = np.where(ok, nb, 1)[:, None]
        cs = cos[:, None]
        ga = gb = None
        if a.requires_grad:
            ga = (-(c[:, None]) * (bd / (na_s * nb_s) - cs * ad / (na_s * na_s))).reshape(a.shape)
        if b.requires_grad:
            gb = (-(c[:, None]) * (ad / (na_s * nb_s) - cs * bd / (nb_s * nb_s))).reshape(b.shape)
        return ga, gb

    return make_result(out, (a, b), bwd, "cosine_distance")
