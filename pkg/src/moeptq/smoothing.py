"""Expert-aware smoothing aggregation.

One channel vector ``s_bar`` is shared by the router and every expert of a
layer, so it can be folded into the preceding RMSNorm gain. Per-expert and
router requirements follow ``s_j = max|x_j|**alpha / max|W_j|**(1 - alpha)``;
``maximum`` mode takes their channel-wise max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .calib_balance import as_tokens
from .model import Expert, MoELayer, MoEModel, block_records, copy_model

STAT_FLOOR = 1e-8
AGG_MODES = ("maximum", "expert_frequency", "router_logits")


@dataclass
class ChannelStats:
    act_max: np.ndarray  # (d,) max |x~_j| over calibration tokens
    expert_wmax: np.ndarray  # (n, d) max |W^i_j| over each input row of the first matrix
    router_wmax: np.ndarray  # (d,)

    def to_dict(self) -> dict:
        return {"act_max": self.act_max.tolist(), "expert_wmax": self.expert_wmax.tolist(),
                "router_wmax": self.router_wmax.tolist()}


@dataclass
class SmoothingVector:
    s: np.ndarray
    alpha: float
    mode: str = "maximum"

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if not (np.all(np.isfinite(self.s)) and np.all(self.s > 0)):
            raise ValueError("smoothing entries must be positive and finite")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "mode": self.mode, "s": self.s.tolist()}


def weight_stats(layer: MoELayer, act_max: np.ndarray) -> ChannelStats:
    expert_wmax = np.stack([np.abs(e.w1).max(axis=1) for e in layer.experts])
    return ChannelStats(
        np.maximum(act_max, STAT_FLOOR),
        np.maximum(expert_wmax, STAT_FLOOR),
        np.maximum(np.abs(layer.router).max(axis=1), STAT_FLOOR),
    )


def collect_stats(model: MoEModel, layer_index: int, calib) -> ChannelStats:
    """Channel maxima of the normalized MoE input at ``layer_index`` plus weight row maxima."""
    tokens = as_tokens(calib)
    if tokens.size == 0:
        raise ValueError("calibration set is empty")
    _, _, records = block_records(model, tokens, upto=layer_index + 1)
    act_max = np.abs(records[layer_index].normed).max(axis=0)
    return weight_stats(model.layers[layer_index], act_max)


def _requirement(act_max: np.ndarray, wmax: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return act_max**alpha / wmax ** (1.0 - alpha)


def per_expert_vector(stats: ChannelStats, i: int, alpha: float = 0.5) -> SmoothingVector:
    return SmoothingVector(_requirement(stats.act_max, stats.expert_wmax[i], alpha), alpha)


def router_vector(stats: ChannelStats, alpha: float = 0.5) -> SmoothingVector:
    return SmoothingVector(_requirement(stats.act_max, stats.router_wmax, alpha), alpha)


def aggregate(vectors, router: SmoothingVector | None = None) -> SmoothingVector:
    vectors = list(vectors) + ([router] if router is not None else [])
    if not vectors:
        raise ValueError("nothing to aggregate")
    d = vectors[0].s.shape
    if any(v.s.shape != d for v in vectors):
        raise ValueError("smoothing vectors differ in length")
    return SmoothingVector(np.max(np.stack([v.s for v in vectors]), axis=0), vectors[0].alpha)


def aggregate_mode(stats: ChannelStats, alpha: float = 0.5, mode: str = "maximum",
                   weights=None) -> SmoothingVector:
    """Aggregate per-expert requirements, then max-join the router requirement.

    ``expert_frequency`` and ``router_logits`` take a weighted mean of the
    expert vectors with ``weights`` (routed-token counts or mean routed gate
    mass per expert). Unlike ``maximum`` they do not dominate every expert.
    """
    if mode not in AGG_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {AGG_MODES}")
    n = stats.expert_wmax.shape[0]
    experts = [per_expert_vector(stats, i, alpha) for i in range(n)]
    router = router_vector(stats, alpha)
    if mode == "maximum":
        out = aggregate(experts, router)
        return SmoothingVector(out.s, alpha, mode)
    if weights is None:
        raise ValueError(f"mode {mode!r} needs per-expert weights")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per expert, not all zero")
    w = w / w.sum()
    mixed = np.sum(w[:, None] * np.stack([v.s for v in experts]), axis=0)
    return SmoothingVector(np.maximum(mixed, router.s), alpha, mode)


def apply_smoothing(layer: MoELayer, sbar: SmoothingVector | np.ndarray) -> MoELayer:
    """Fold ``sbar`` into the layer: rows of the router and of each expert's first
    matrix scale by ``sbar``, the norm gain divides by it. The forward pass is
    unchanged in exact arithmetic and gains no extra per-token operation.
    """
    s = sbar.s if isinstance(sbar, SmoothingVector) else np.asarray(sbar, dtype=np.float64)
    if s.shape != layer.norm_gain.shape:
        raise ValueError(f"smoothing length {s.shape} != d={layer.norm_gain.shape[0]}")
    if not np.all(s > 0):
        raise ValueError("smoothing entries must be positive")
    col = s[:, None]
    return MoELayer(
        layer.norm_gain / s,
        layer.router * col,
        [Expert(e.w1 * col, e.w2.copy()) for e in layer.experts],
        layer.router_bias.copy(),
    )


def smooth_model(model: MoEModel, vectors: dict[int, SmoothingVector]) -> MoEModel:
    out = copy_model(model)
    for l, v in vectors.items():
        out.layers[l] = apply_smoothing(model.layers[l], v)
    return out


def routed_gate_mass(model: MoEModel, layer_index: int, calib) -> np.ndarray:
    """Mean gate value each expert receives per token (0 when not selected)."""
    tokens = as_tokens(calib)
    _, counts, records = block_records(model, tokens, upto=layer_index + 1)
    trace = records[layer_index].trace
    mass = np.zeros(model.config.n)
    np.add.at(mass, trace.experts.reshape(-1), (trace.gates * counts[:, None]).reshape(-1))
    return mass / counts.sum()


def activation_outlier_ratio(x: np.ndarray) -> np.ndarray:
    """Per-channel max|x| divided by the median channel max|x|."""
    cmax = np.abs(tc.as_matrix(x)).max(axis=0)
    return cmax / np.median(cmax)
