# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Every routine here has a numpy twin in ``_fallback`` that produces bit-identical
results; the arithmetic is written operation-for-operation the same way.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, copysign

cnp.import_array()

BACKEND = "cython"


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], inner = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double aip
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for p in range(inner):
                aip = a[i, p]
                for j in range(n):
                    o[i, j] += aip * b[p, j]
    return out


# Branch-free so the element loops vectorize. Ratios are pre-clipped to
# +-RATIO_BOUND, far outside any int8 grid, so truncation through int32 equals
# floor and the clipped code is unchanged.
cdef double RATIO_BOUND = 1073741824.0


cdef inline double _round_half_away(double v) noexcept nogil:
    cdef double a = fabs(v)
    cdef double f = <double>(<int>a)
    return copysign(f + <double>(a - f >= 0.5), v)


cdef inline double _clip(double v, double lo, double hi) noexcept nogil:
    v = lo if v < lo else v
    return hi if v > hi else v


def quantize(const double[:, ::1] t, const double[:, ::1] scale,
             const double[:, ::1] zero, double qmin, double qmax):
    cdef Py_ssize_t size = t.shape[0] * t.shape[1], i
    out = np.empty((t.shape[0], t.shape[1]), dtype=np.int8)
    if size == 0:
        return out
    cdef cnp.int8_t[::1] o = out.reshape(-1)
    cdef const double *tp = &t[0, 0]
    cdef const double *sp = &scale[0, 0]
    cdef const double *zp = &zero[0, 0]
    with nogil:
        for i in range(size):
            o[i] = <cnp.int8_t>_clip(
                _round_half_away(_clip(tp[i] / sp[i], -RATIO_BOUND, RATIO_BOUND)) + zp[i], qmin, qmax)
    return out


def fake_quant_rows(const double[:, ::1] x, double qmin, double qmax,
                    bint symmetric, double scale_floor):
    """Dynamic per-row quantize-dequantize; returns (values, scales, zeros)."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    cdef double lo, hi, v, s, z, q, levels = qmax - qmin
    out = np.empty((m, n), dtype=np.float64)
    scales = np.empty(m, dtype=np.float64)
    zeros = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] sv = scales
    cdef double[::1] zv = zeros
    with nogil:
        for i in range(m):
            lo = 0.0
            hi = 0.0
            for j in range(n):
                v = x[i, j]
                if symmetric:
                    v = fabs(v)
                    if v > hi:
                        hi = v
                else:
                    if v < lo:
                        lo = v
                    if v > hi:
                        hi = v
            if symmetric:
                s = hi / qmax
                z = 0.0
            else:
                s = (hi - lo) / levels
            if s < scale_floor:
                s = scale_floor
            if not symmetric:
                z = _clip(qmin - _round_half_away(_clip(lo / s, -RATIO_BOUND, RATIO_BOUND)), qmin, qmax)
            sv[i] = s
            zv[i] = z
            for j in range(n):
                q = _clip(_round_half_away(_clip(x[i, j] / s, -RATIO_BOUND, RATIO_BOUND)) + z, qmin, qmax)
                o[i, j] = (q - z) * s
    return out, scales, zeros


def topk_rows(const double[:, ::1] v, Py_ssize_t k):
    """Indices of the k largest entries per row, descending; ties -> lower index."""
    cdef Py_ssize_t m = v.shape[0], n = v.shape[1], i, j, pos, filled
    cdef double val
    out = np.empty((m, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    with nogil:
        for i in range(m):
            filled = 0
            for j in range(n):
                val = v[i, j]
                if filled == k and not (val > v[i, o[i, k - 1]]):
                    continue
                # strict '>' keeps earlier (lower) indices ahead of equal values
                pos = filled if filled < k else k - 1
                while pos > 0 and val > v[i, o[i, pos - 1]]:
                    o[i, pos] = o[i, pos - 1]
                    pos -= 1
                o[i, pos] = j
                if filled < k:
                    filled += 1
    return out
