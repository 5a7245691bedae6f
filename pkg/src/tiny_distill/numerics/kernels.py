"""Kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
reference kernels are used. ``TINY_DISTILL_BACKEND=numpy`` forces the
fallback, ``=cython`` makes a missing extension an import error.
Both backends expose the same wrappers below; tests cross-check them.
"""

import os

import numpy as np

from . import _kernels_py

_requested = os.environ.get("TINY_DISTILL_BACKEND", "auto").lower()

_compiled = None
if _requested != "numpy":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        if _requested == "cython":
            raise
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def _c(a):
    return np.ascontiguousarray(a)


class _Backend:
    """Uniform wrapper over one kernel module."""

    def __init__(self, mod):
        self.mod = mod
        self.name = mod.BACKEND

    def causal_softmax(self, scores, scale):
        if self.mod is _kernels_py:
            return _kernels_py.causal_softmax(scores, scale)
        t = scores.shape[-1]
        out = self.mod.causal_softmax3(_c(scores).reshape(-1, t, t), float(scale))
        return out.reshape(scores.shape)

    def causal_softmax_bwd(self, probs, dprobs, scale):
        if self.mod is _kernels_py:
            return _kernels_py.causal_softmax_bwd(probs, dprobs, scale)
        t = probs.shape[-1]
        out = self.mod.causal_softmax_bwd3(
            _c(probs).reshape(-1, t, t), _c(dprobs).reshape(-1, t, t), float(scale)
        )
        return out.reshape(probs.shape)

    def rmsnorm(self, x2, w, eps):
        return self.mod.rmsnorm(_c(x2), _c(w), float(eps))

    def rmsnorm_bwd(self, dy2, x2, w, rstd):
        return self.mod.rmsnorm_bwd(_c(dy2), _c(x2), _c(w), _c(rstd))

    def rope(self, x, cos, sin, inverse=False):
        if self.mod is _kernels_py:
            return _kernels_py.rope(x, cos, sin, inverse)
        t, hd = x.shape[-2], x.shape[-1]
        out = self.mod.rope3(_c(x).reshape(-1, t, hd), _c(cos), _c(sin), bool(inverse))
        return out.reshape(x.shape)

    def silu_mul(self, a, b):
        if self.mod is _kernels_py:
            return _kernels_py.silu_mul(a, b)
        return self.mod.silu_mul(_c(a).ravel(), _c(b).ravel()).reshape(a.shape)

    def silu_mul_bwd(self, dout, a, b):
        if self.mod is _kernels_py:
            return _kernels_py.silu_mul_bwd(dout, a, b)
        da, db = self.mod.silu_mul_bwd(_c(dout).ravel(), _c(a).ravel(), _c(b).ravel())
        return da.reshape(a.shape), db.reshape(b.shape)

    def cross_entropy_rows(self, logits2, targets):
        return self.mod.cross_entropy_rows(_c(logits2), _c(targets.astype(np.int64, copy=False)))

    def sample_chain(self, cdf, first, uniforms):
        return self.mod.sample_chain(
            _c(np.asarray(cdf, dtype=np.float64)), int(first), _c(np.asarray(uniforms, dtype=np.float64))
        )


numpy_backend = _Backend(_kernels_py)
compiled_backend = _Backend(_compiled) if _compiled is not None else None
active = compiled_backend if compiled_backend is not None else numpy_backend
