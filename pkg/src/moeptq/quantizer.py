"""Uniform affine quantization: Q(t) = clip(round(t / scale) + zero, q_min, q_max).

Weights use per-channel groups (one per output column of a ``d_in x d_out``
matrix), activations per-token groups (one per row, computed dynamically at
inference), and ``per-tensor`` a single group. Rounding is half away from zero.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import io
from . import tensor_core as tc
from .model import ActQuant, MoEModel, copy_model

GRANULARITIES = ("per-channel", "per-token", "per-tensor")
SUPPORTED_BITS = (3, 4, 8)
DEFAULT_MULTIPLIERS = tuple(np.linspace(0.4, 1.2, 64))
ZERO_OFFSETS = (-1, 0, 1)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    symmetric: bool = False
    granularity: str = "per-channel"

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def q_min(self) -> int:
        return tc.grid_bounds(self.bits, self.symmetric)[0]

    @property
    def q_max(self) -> int:
        return tc.grid_bounds(self.bits, self.symmetric)[1]

    def groups(self, shape: tuple[int, int]) -> int:
        return {"per-channel": shape[1], "per-token": shape[0], "per-tensor": 1}[self.granularity]

    def to_dict(self) -> dict:
        return {"bits": self.bits, "symmetric": self.symmetric, "granularity": self.granularity}


@dataclass
class QuantParams:
    scale: np.ndarray
    zero: np.ndarray

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.zero = np.atleast_1d(np.asarray(self.zero, dtype=np.int64))
        if self.scale.shape != self.zero.shape:
            raise ValueError("scale and zero-point group counts differ")

    def copy(self) -> "QuantParams":
        return QuantParams(self.scale.copy(), self.zero.copy())

    def to_dict(self) -> dict:
        return {"scale": [float(s) for s in self.scale], "zero": [int(z) for z in self.zero]}


def _expand(values: np.ndarray, spec: QuantSpec, shape) -> np.ndarray:
    if spec.granularity == "per-channel":
        return values.reshape(1, -1)
    if spec.granularity == "per-token":
        return values.reshape(-1, 1)
    return values.reshape(1, 1)


def _check(t: np.ndarray, params: QuantParams, spec: QuantSpec) -> None:
    g = spec.groups(t.shape)
    if params.scale.shape != (g,):
        raise ValueError(f"{spec.granularity} on shape {t.shape} needs {g} groups, "
                         f"params have {params.scale.shape[0]}")
    if not np.all(params.scale > 0):
        raise ValueError("quantization scale must be positive")
    if np.any(params.zero < spec.q_min) or np.any(params.zero > spec.q_max):
        raise ValueError("zero-point outside the integer grid")


def quantize(t, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    t = tc.as_matrix(t)
    _check(t, params, spec)
    return tc.quantize_grid(t, _expand(params.scale, spec, t.shape),
                            _expand(params.zero.astype(np.float64), spec, t.shape),
                            spec.q_min, spec.q_max)


def dequantize(q, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim != 2:
        raise ValueError("expected a 2-D integer grid tensor")
    if params.scale.shape != (spec.groups(q.shape),):
        raise ValueError("group count mismatch between codes and params")
    z = _expand(params.zero.astype(np.float64), spec, q.shape)
    return (q.astype(np.float64) - z) * _expand(params.scale, spec, q.shape)


def fake_quantize(t, params: QuantParams, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(t, params, spec), params, spec)


def _group_reduce(t: np.ndarray, spec: QuantSpec, fn) -> np.ndarray:
    if spec.granularity == "per-channel":
        return fn(t, axis=0)
    if spec.granularity == "per-token":
        return fn(t, axis=1)
    return np.atleast_1d(fn(t))


def minmax_params(t, spec: QuantSpec) -> QuantParams:
    """Range-covering params: nothing inside [min(t, 0), max(t, 0)] gets clipped."""
    t = tc.as_matrix(t)
    if spec.symmetric:
        scale = _group_reduce(np.abs(t), spec, np.max) / spec.q_max
        scale = np.maximum(scale, tc.SCALE_FLOOR)
        return QuantParams(scale, np.zeros_like(scale, dtype=np.int64))
    lo = np.minimum(_group_reduce(t, spec, np.min), 0.0)
    hi = np.maximum(_group_reduce(t, spec, np.max), 0.0)
    scale = np.maximum((hi - lo) / (spec.q_max - spec.q_min), tc.SCALE_FLOOR)
    zero = np.clip(spec.q_min - _round_half_away(lo / scale), spec.q_min, spec.q_max).astype(np.int64)
    zero[hi == lo] = 0  # all-zero group: any zero-point is exact, keep the neutral one
    return QuantParams(scale, zero)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    a = np.abs(v)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), v)


def candidate_grid(spec: QuantSpec, grid=None) -> list[tuple[float, int]]:
    """(scale multiplier, zero-point offset) candidates in evaluation order.

    ``grid`` may be a sequence of multipliers or of (multiplier, offset) pairs.
    The default is 64 multipliers in [0.4, 1.2] plus the identity 1.0, crossed
    with zero-point offsets -1, 0, +1 for asymmetric specs.
    """
    if grid is None:
        mults = sorted(set(DEFAULT_MULTIPLIERS) | {1.0})
        offsets = (0,) if spec.symmetric else ZERO_OFFSETS
        return [(float(m), o) for m in mults for o in offsets]
    cands = []
    for c in grid:
        m, o = (c, 0) if np.isscalar(c) else c
        if not m > 0:
            raise ValueError(f"scale multiplier must be positive, got {m}")
        cands.append((float(m), int(o)))
    if not cands:
        raise ValueError("search grid is empty")
    return cands


def _apply(base: QuantParams, spec: QuantSpec, cand: tuple[float, int], groups=slice(None),
           into: QuantParams | None = None) -> QuantParams:
    out = base.copy() if into is None else into
    m, o = cand
    out.scale[groups] = np.maximum(base.scale[groups] * m, tc.SCALE_FLOOR)
    out.zero[groups] = np.clip(base.zero[groups] + o, spec.q_min, spec.q_max)
    return out


def search_params(t, spec: QuantSpec, objective: Callable[[QuantParams], float | np.ndarray],
                  grid: Sequence | None = None) -> QuantParams:
    """Grid search over scale multipliers (and zero offsets) around minmax, per group.

    If ``objective`` returns one value per group the groups are independent and
    all of them are searched jointly; a scalar objective is minimized one group
    at a time in ascending group order with the others held at their current
    best. Ties go to the earliest candidate. Since the identity candidate is in
    the default grid, the result never scores worse than ``minmax_params``.
    """
    t = tc.as_matrix(t)
    cands = candidate_grid(spec, grid)
    base = minmax_params(t, spec)
    probe = np.asarray(objective(base), dtype=np.float64)
    groups = base.scale.shape[0]

    if probe.ndim == 1 and probe.shape == (groups,):
        best_val = np.full(groups, np.inf)
        best = base.copy()
        for cand in cands:
            trial = _apply(base, spec, cand)
            val = np.asarray(objective(trial), dtype=np.float64)
            better = val < best_val
            best_val[better] = val[better]
            best.scale[better] = trial.scale[better]
            best.zero[better] = trial.zero[better]
        return best

    current = base.copy()
    for g in range(groups):
        best_val, best_cand = np.inf, None
        for cand in cands:
            trial = _apply(base, spec, cand, groups=[g], into=current.copy())
            val = float(objective(trial))
            if val < best_val:
                best_val, best_cand = val, cand
        if best_cand is not None:
            _apply(base, spec, best_cand, groups=[g], into=current)
    return current


@dataclass
class QuantRecord:
    codes: np.ndarray
    params: QuantParams
    spec: QuantSpec


@dataclass
class QuantizedModel:
    """A model whose listed weights were replaced by dequantized grid values.

    ``model`` holds the dequantized weights used by the forward pass; ``records``
    keeps the integer codes and params per tensor name for serialization.
    """

    model: MoEModel
    act: ActQuant = field(default_factory=ActQuant)
    records: dict[str, QuantRecord] = field(default_factory=dict)


def save_quantized(qm: QuantizedModel, path) -> None:
    tensors = []
    for name, arr, _ in io.model_tensors(qm.model, "f64"):
        rec = qm.records.get(name)
        tensors.append((name, rec.codes, "i8") if rec is not None else (name, arr, "f64"))
    header = io.model_header(qm.model, kind="quantized")
    header["activation"] = {"expert_bits": qm.act.expert_bits, "router_bits": qm.act.router_bits,
                            "symmetric": qm.act.symmetric, "granularity": "per-token"}
    header["quant"] = {name: {**rec.spec.to_dict(), **rec.params.to_dict()}
                       for name, rec in qm.records.items()}
    io.atomic_write(path, io.encode_container(header, tensors))


def load_quantized(path) -> QuantizedModel:
    header, tensors = io.read_container(path)
    if header.get("kind") != "quantized":
        raise io.FormatError(f"{path}: not a quantized model file (kind={header.get('kind')!r})")
    records = {}
    try:
        for name, rec in header.get("quant", {}).items():
            spec = QuantSpec(rec["bits"], rec["symmetric"], rec["granularity"])
            params = QuantParams(rec["scale"], rec["zero"])
            codes = tensors[name]
            tensors[name] = dequantize(codes, params, spec)
            records[name] = QuantRecord(codes, params, spec)
        a = header["activation"]
        act = ActQuant(a["expert_bits"], a["router_bits"], a["symmetric"])
    except (KeyError, TypeError, ValueError) as exc:
        raise io.FormatError(f"{path}: bad quantization record ({exc})") from None
    model = io.model_from_tensors(header, tensors, str(path))
    return QuantizedModel(model, act, records)


def identity_quantized(model: MoEModel) -> QuantizedModel:
    return QuantizedModel(copy_model(model))
