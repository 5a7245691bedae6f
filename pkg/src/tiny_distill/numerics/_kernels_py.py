"""Pure-numpy reference kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Inputs are C-contiguous float32/float64 arrays; outputs are new
arrays of the input dtype.
"""

import numpy as np

BACKEND = "numpy"


def causal_softmax(scores, scale):
    """Row softmax of ``scale * scores`` over the last axis with future
    positions (column > row) set to exactly zero. ``scores``: [..., T, T]."""
    t = scores.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), 1)
    s = np.where(mask, -np.inf, scores * scores.dtype.type(scale))
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def causal_softmax_bwd(probs, dprobs, scale):
    inner = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner) * probs.dtype.type(scale)


def rmsnorm(x, w, eps):
    """x: [N, d], w: [d] -> (y, rstd[N])."""
    ms = np.mean(x * x, axis=1)
    rstd = 1.0 / np.sqrt(ms + x.dtype.type(eps))
    y = x * rstd[:, None] * w
    return y, rstd.astype(x.dtype, copy=False)


def rmsnorm_bwd(dy, x, w, rstd):
    xhat = x * rstd[:, None]
    dw = np.sum(dy * xhat, axis=0)
    dxhat = dy * w
    proj = np.mean(dxhat * xhat, axis=1)
    dx = rstd[:, None] * (dxhat - xhat * proj[:, None])
    return dx, dw


def rope(x, cos, sin, inverse):
    """Rotate the two halves of the last axis. x: [..., T, hd];
    cos/sin: [T, hd // 2]."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    s = -sin if inverse else sin
    out = np.empty_like(x)
    out[..., :half] = x1 * cos - x2 * s
    out[..., half:] = x1 * s + x2 * cos
    return out


def silu_mul(a, b):
    sig = 1.0 / (1.0 + np.exp(-a))
    return a * sig * b


def silu_mul_bwd(dout, a, b):
    sig = 1.0 / (1.0 + np.exp(-a))
    silu = a * sig
    da = dout * b * (sig * (1.0 + a * (1.0 - sig)))
    db = dout * silu
    return da, db


def cross_entropy_rows(logits, targets):
    """logits: [N, V], targets: int64[N] -> (nll[N], probs[N, V])."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    nll = -logp[np.arange(logits.shape[0]), targets]
    return nll, np.exp(logp)


def sample_chain(cdf, first, uniforms):
    """Walk a Markov chain. cdf: float64[V, V] cumulative rows; uniforms
    drive each transition through an inverse-CDF lookup."""
    n = uniforms.shape[0] + 1
    v = cdf.shape[0]
    out = np.empty(n, dtype=np.int64)
    state = int(first)
    out[0] = state
    for i in range(1, n):
        nxt = int(np.searchsorted(cdf[state], uniforms[i - 1], side="right"))
        state = nxt if nxt < v else v - 1
        out[i] = state
    return out
