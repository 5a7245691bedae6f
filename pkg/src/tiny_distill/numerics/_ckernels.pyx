# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels mirroring ``_kernels_py``.

Loops are written in a fixed order so results are bitwise reproducible for a
given build. The dispatcher in ``kernels.py`` reshapes inputs to the 2D/3D
contiguous views these functions expect.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, log, logf, sqrt, sqrtf

cnp.import_array()

BACKEND = "cython"


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


cdef inline floating _log(floating x) noexcept nogil:
    if floating is float:
        return logf(x)
    else:
        return log(x)


cdef inline floating _sqrt(floating x) noexcept nogil:
    if floating is float:
        return sqrtf(x)
    else:
        return sqrt(x)


def causal_softmax3(const floating[:, :, ::1] scores, double scale):
    cdef Py_ssize_t r, i, j
    cdef Py_ssize_t nr = scores.shape[0], t = scores.shape[1]
    cdef floating sc = <floating>scale
    cdef floating m, v, total, inv
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((nr, t, t), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    with nogil:
        for r in range(nr):
            for i in range(t):
                m = scores[r, i, 0] * sc
                for j in range(1, i + 1):
                    v = scores[r, i, j] * sc
                    if v > m:
                        m = v
                total = 0
                for j in range(i + 1):
                    v = _exp(scores[r, i, j] * sc - m)
                    out[r, i, j] = v
                    total = total + v
                inv = 1 / total
                for j in range(i + 1):
                    out[r, i, j] = out[r, i, j] * inv
                for j in range(i + 1, t):
                    out[r, i, j] = 0
    return out_arr


def causal_softmax_bwd3(const floating[:, :, ::1] probs, const floating[:, :, ::1] dprobs, double scale):
    cdef Py_ssize_t r, i, j
    cdef Py_ssize_t nr = probs.shape[0], t = probs.shape[1]
    cdef floating sc = <floating>scale
    cdef floating inner
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((nr, t, t), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    with nogil:
        for r in range(nr):
            for i in range(t):
                inner = 0
                for j in range(i + 1):
                    inner = inner + probs[r, i, j] * dprobs[r, i, j]
                for j in range(i + 1):
                    out[r, i, j] = probs[r, i, j] * (dprobs[r, i, j] - inner) * sc
                for j in range(i + 1, t):
                    out[r, i, j] = 0
    return out_arr


def rmsnorm(const floating[:, ::1] x, const floating[::1] w, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef floating acc, r
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] rstd = rstd_arr
    with nogil:
        for i in range(n):
            acc = 0
            for j in range(d):
                acc = acc + x[i, j] * x[i, j]
            r = 1 / _sqrt(acc / d + <floating>eps)
            rstd[i] = r
            for j in range(d):
                y[i, j] = x[i, j] * r * w[j]
    return y_arr, rstd_arr


def rmsnorm_bwd(const floating[:, ::1] dy, const floating[:, ::1] x, const floating[::1] w, const floating[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef floating r, proj, xhat
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dw_arr = np.zeros(d, dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef floating[::1] dw = dw_arr
    with nogil:
        for i in range(n):
            r = rstd[i]
            proj = 0
            for j in range(d):
                xhat = x[i, j] * r
                dw[j] = dw[j] + dy[i, j] * xhat
                proj = proj + dy[i, j] * w[j] * xhat
            proj = proj / d
            for j in range(d):
                dx[i, j] = r * (dy[i, j] * w[j] - x[i, j] * r * proj)
    return dx_arr, dw_arr


def rope3(const floating[:, :, ::1] x, const floating[:, ::1] cos, const floating[:, ::1] sin, bint inverse):
    cdef Py_ssize_t nr = x.shape[0], t = x.shape[1], hd = x.shape[2]
    cdef Py_ssize_t half = hd // 2, r, i, j
    cdef floating c, s, a, b
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((nr, t, hd), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    with nogil:
        for r in range(nr):
            for i in range(t):
                for j in range(half):
                    c = cos[i, j]
                    s = -sin[i, j] if inverse else sin[i, j]
                    a = x[r, i, j]
                    b = x[r, i, j + half]
                    out[r, i, j] = a * c - b * s
                    out[r, i, j + half] = a * s + b * c
    return out_arr


def silu_mul(const floating[::1] a, const floating[::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    cdef floating sig
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] out = out_arr
    with nogil:
        for i in range(n):
            sig = 1 / (1 + _exp(-a[i]))
            out[i] = a[i] * sig * b[i]
    return out_arr


def silu_mul_bwd(const floating[::1] dout, const floating[::1] a, const floating[::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    cdef floating sig
    dtype = np.float32 if floating is float else np.float64
    da_arr = np.empty(n, dtype=dtype)
    db_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] da = da_arr
    cdef floating[::1] db = db_arr
    with nogil:
        for i in range(n):
            sig = 1 / (1 + _exp(-a[i]))
            da[i] = dout[i] * b[i] * (sig * (1 + a[i] * (1 - sig)))
            db[i] = dout[i] * a[i] * sig
    return da_arr, db_arr


def cross_entropy_rows(const floating[:, ::1] logits, const cnp.int64_t[::1] targets):
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1], i, j
    cdef floating m, total, lse
    dtype = np.float32 if floating is float else np.float64
    nll_arr = np.empty(n, dtype=dtype)
    probs_arr = np.empty((n, v), dtype=dtype)
    cdef floating[::1] nll = nll_arr
    cdef floating[:, ::1] probs = probs_arr
    with nogil:
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > m:
                    m = logits[i, j]
            total = 0
            for j in range(v):
                total = total + _exp(logits[i, j] - m)
            lse = _log(total)
            for j in range(v):
                probs[i, j] = _exp(logits[i, j] - m - lse)
            nll[i] = -(logits[i, targets[i]] - m - lse)
    return nll_arr, probs_arr


def sample_chain(const double[:, ::1] cdf, Py_ssize_t first, const double[::1] uniforms):
    cdef Py_ssize_t n = uniforms.shape[0] + 1, v = cdf.shape[0]
    cdef Py_ssize_t i, lo, hi, mid, state = first
    cdef double u
    out_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    with nogil:
        out[0] = state
        for i in range(1, n):
            u = uniforms[i - 1]
            # first index with cdf > u
            lo = 0
            hi = v
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf[state, mid] > u:
                    hi = mid
                else:
                    lo = mid + 1
            state = lo if lo < v else v - 1
            out[i] = state
    return out_arr
