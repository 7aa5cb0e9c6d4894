"""Pure numpy kernels, bit-identical to the compiled ``_kernels`` module.

Used when the extension is not built or ``MOEPTQ_PURE=1`` is set.
"""

import numpy as np

BACKEND = "python"


def matmul(a, b):
    m, inner = a.shape
    out = np.zeros((m, b.shape[1]), dtype=np.float64)
    # accumulate over the inner dimension left to right, like the compiled loop
    for p in range(inner):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


# ratios are bounded before rounding, as in the compiled kernels
RATIO_BOUND = 1073741824.0


def _ratio(num, den):
    return np.clip(num / den, -RATIO_BOUND, RATIO_BOUND)


def _round_half_away(v):
    a = np.abs(v)
    f = np.floor(a)
    f = f + (a - f >= 0.5)
    return np.copysign(f, v)


def quantize(t, scale, zero, qmin, qmax):
    q = np.clip(_round_half_away(_ratio(t, scale)) + zero, qmin, qmax)
    return q.astype(np.int8)


def fake_quant_rows(x, qmin, qmax, symmetric, scale_floor):
    if x.shape[1] == 0:
        m = x.shape[0]
        return x.copy(), np.full(m, scale_floor), np.zeros(m)
    if symmetric:
        hi = np.maximum(np.abs(x).max(axis=1), 0.0)
        s = hi / qmax
        s = np.where(s < scale_floor, scale_floor, s)
        z = np.zeros_like(s)
    else:
        lo = np.minimum(x.min(axis=1), 0.0)
        hi = np.maximum(x.max(axis=1), 0.0)
        s = (hi - lo) / (qmax - qmin)
        s = np.where(s < scale_floor, scale_floor, s)
        z = np.clip(qmin - _round_half_away(_ratio(lo, s)), qmin, qmax)
    q = np.clip(_round_half_away(_ratio(x, s[:, None])) + z[:, None], qmin, qmax)
    return (q - z[:, None]) * s[:, None], s, z


def topk_rows(v, k):
    # stable sort on the negated values: descending, ties keep ascending index
    return np.argsort(-v, axis=1, kind="stable")[:, :k].astype(np.int64)
