"""Deterministic dense numeric kernels.

Matrices are C-contiguous float64 numpy arrays. The hot loops (``matmul``,
``quantize_grid``, ``fake_quant_rows``, ``topk_rows``) come from the compiled
``_kernels`` extension when it is importable, otherwise from the numpy
``_fallback``; both give bit-identical results. Set ``MOEPTQ_PURE=1`` to force
the fallback.
"""

from __future__ import annotations

import contextlib
import os
import threading
from collections import Counter
from dataclasses import dataclass

import numpy as np

if os.environ.get("MOEPTQ_PURE"):
    from . import _fallback as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        from . import _fallback as _impl

BACKEND: str = _impl.BACKEND

KL_FLOOR = 1e-12
SCALE_FLOOR = 1e-8

_local = threading.local()


@contextlib.contextmanager
def count_ops():
    """Count kernel invocations made by the current thread inside the block."""
    prev = getattr(_local, "counter", None)
    counter: Counter = Counter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _tick(name: str) -> None:
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter[name] += 1


def as_matrix(x) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class TopKSelection:
    indices: tuple[int, ...]
    values: tuple[float, ...]


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation order."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    _tick("matmul")
    return _impl.matmul(a, b)


def softmax_rows(logits) -> np.ndarray:
    z = as_matrix(logits)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_rows requires finite inputs")
    _tick("softmax")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits) -> np.ndarray:
    z = as_matrix(logits)
    _tick("log_softmax")
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def rmsnorm(x, gain, eps: float = 1e-6) -> np.ndarray:
    x = as_matrix(x)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != (x.shape[1],):
        raise ValueError(f"gain length {gain.shape} does not match {x.shape[1]} columns")
    _tick("rmsnorm")
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    return (x * inv) * gain


def silu(x: np.ndarray) -> np.ndarray:
    _tick("silu")
    return x / (1.0 + np.exp(-x))


def topk_rows(v, k: int) -> np.ndarray:
    """Per-row top-k indices, descending by value, ties resolved to the lower index."""
    v = as_matrix(v)
    if not 1 <= k <= v.shape[1]:
        raise ValueError(f"k={k} out of range for {v.shape[1]} columns")
    _tick("topk")
    return _impl.topk_rows(v, k)


def topk(v, k: int) -> TopKSelection:
    row = np.asarray(v, dtype=np.float64).reshape(1, -1)
    idx = topk_rows(row, k)[0]
    return TopKSelection(tuple(int(i) for i in idx), tuple(float(row[0, i]) for i in idx))


def quantize_grid(t, scale, zero, qmin: int, qmax: int) -> np.ndarray:
    """Elementwise clip(round_half_away(t / scale) + zero); scale/zero broadcast to t."""
    t = as_matrix(t)
    scale = np.ascontiguousarray(np.broadcast_to(scale, t.shape), dtype=np.float64)
    zero = np.ascontiguousarray(np.broadcast_to(zero, t.shape), dtype=np.float64)
    _tick("quantize")
    return _impl.quantize(t, scale, zero, float(qmin), float(qmax))


def fake_quant_rows(x, bits: int, symmetric: bool = False):
    """Dynamic per-token quantize-dequantize of each row. Returns (values, scales, zeros)."""
    x = as_matrix(x)
    qmin, qmax = grid_bounds(bits, symmetric)
    _tick("act_quant")
    return _impl.fake_quant_rows(x, float(qmin), float(qmax), bool(symmetric), SCALE_FLOOR)


def grid_bounds(bits: int, symmetric: bool = False) -> tuple[int, int]:
    # one signed grid for both modes so codes always fit int8 storage
    del symmetric
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1")
    return float(kl_rows(p.reshape(1, -1), q.reshape(1, -1))[0])


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise D_KL(p || q) in nats with q floored at 1e-12; 0 log 0 = 0."""
    qf = np.maximum(q, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(qf)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0)
