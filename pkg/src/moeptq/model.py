"""Toy MoE language model: layer forward with routing trace, LM forward, synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor_core as tc

GATE_MODES = ("softmax-topk-renorm", "topk-softmax", "softmax-topk")
DEFAULT_GATE_MODE = "softmax-topk-renorm"

# generator constants; chosen so the fp model has a moderately peaked bigram chain
ROUTER_LOGIT_STD = 2.5
EXPERT_OUT_STD = 1.0
LOGIT_TEMPERATURE = 0.2
OUTLIER_JITTER = 0.25


@dataclass(frozen=True)
class MoEConfig:
    d: int = 64
    n: int = 8
    k: int = 2
    hidden: int = 128
    layers: int = 2
    vocab: int = 256
    gate_mode: str = DEFAULT_GATE_MODE
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("d", "n", "k", "hidden", "layers", "vocab"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k > self.n:
            raise ValueError(f"k={self.k} exceeds expert count n={self.n}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"unknown gate_mode {self.gate_mode!r}; expected one of {GATE_MODES}")

    def to_dict(self) -> dict:
        return {
            "d": self.d, "n": self.n, "k": self.k, "hidden": self.hidden,
            "layers": self.layers, "vocab": self.vocab,
            "gate_mode": self.gate_mode, "eps": self.eps,
        }


@dataclass
class Expert:
    w1: np.ndarray  # d x hidden, the matrix smoothing rescales
    w2: np.ndarray  # hidden x d

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return tc.matmul(tc.silu(tc.matmul(x, self.w1)), self.w2)


@dataclass
class MoELayer:
    norm_gain: np.ndarray
    router: np.ndarray  # d x n
    experts: list[Expert]
    router_bias: np.ndarray | None = None

    def __post_init__(self):
        d = self.norm_gain.shape[0]
        if self.router.shape[0] != d or self.router.shape[1] != len(self.experts):
            raise ValueError(
                f"router shape {self.router.shape} inconsistent with d={d}, n={len(self.experts)}")
        if self.router_bias is None:
            self.router_bias = np.zeros(self.router.shape[1])
        for i, e in enumerate(self.experts):
            if e.w1.shape[0] != d or e.w2.shape[1] != d or e.w1.shape[1] != e.w2.shape[0]:
                raise ValueError(f"expert {i} shapes {e.w1.shape}/{e.w2.shape} inconsistent with d={d}")

    @property
    def n(self) -> int:
        return len(self.experts)


@dataclass
class MoEModel:
    config: MoEConfig
    embed: np.ndarray  # vocab x d, also the tied output projection
    layers: list[MoELayer]
    final_gain: np.ndarray


@dataclass(frozen=True)
class ActQuant:
    """Dynamic per-token activation quantization applied inside the forward pass.

    ``expert_bits`` covers both expert matmul inputs; ``router_bits`` the router input.
    ``None`` leaves that path in full precision.
    """

    expert_bits: int | None = None
    router_bits: int | None = None
    symmetric: bool = False


@dataclass
class RoutingTrace:
    logits: np.ndarray  # tokens x n, pre-softmax (bias included)
    experts: np.ndarray  # tokens x k, descending by logit
    gates: np.ndarray  # tokens x k


def route(logits: np.ndarray, k: int, gate_mode: str) -> tuple[np.ndarray, np.ndarray]:
    sel = tc.topk_rows(logits, k)
    if gate_mode == "topk-softmax":
        gates = tc.softmax_rows(np.take_along_axis(logits, sel, axis=1))
    else:
        probs = np.take_along_axis(tc.softmax_rows(logits), sel, axis=1)
        gates = probs / probs.sum(axis=1, keepdims=True) if gate_mode == "softmax-topk-renorm" else probs
    return sel, gates


def _maybe_quant(x: np.ndarray, bits: int | None, symmetric: bool) -> np.ndarray:
    if bits is None:
        return x
    return tc.fake_quant_rows(x, bits, symmetric)[0]


def moe_forward(layer: MoELayer, x, *, eps: float = 1e-6, k: int | None = None,
                gate_mode: str = DEFAULT_GATE_MODE, act: ActQuant | None = None):
    """One MoE block on the residual stream ``x`` (tokens x d). Returns (y, trace).

    The router and the experts consume the same normalized input. ``k`` defaults
    to 2 capped at the expert count when not given.
    """
    x = tc.as_matrix(x)
    if x.shape[1] != layer.norm_gain.shape[0]:
        raise ValueError(f"input width {x.shape[1]} != d={layer.norm_gain.shape[0]}")
    if gate_mode not in GATE_MODES:
        raise ValueError(f"unknown gate_mode {gate_mode!r}")
    k = min(2, layer.n) if k is None else k
    act = act or ActQuant()
    xn = tc.rmsnorm(x, layer.norm_gain, eps)
    logits = tc.matmul(_maybe_quant(xn, act.router_bits, act.symmetric), layer.router) + layer.router_bias
    sel, gates = route(logits, k, gate_mode)
    xq = _maybe_quant(xn, act.expert_bits, act.symmetric)
    y = np.zeros_like(x)
    for i, expert in enumerate(layer.experts):
        rows, slot = np.nonzero(sel == i)
        if rows.size == 0:
            continue
        h = tc.silu(tc.matmul(xq[rows], expert.w1))
        out = tc.matmul(_maybe_quant(h, act.expert_bits, act.symmetric), expert.w2)
        y[rows] += gates[rows, slot][:, None] * out
    return y, RoutingTrace(logits, sel, gates)


@dataclass
class BlockRecord:
    residual: np.ndarray  # input to the block (pre-norm)
    normed: np.ndarray  # what the router and experts consume (pre activation quant)
    trace: RoutingTrace


def _check_tokens(model: MoEModel, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab):
        raise ValueError(f"token id out of range [0, {model.config.vocab})")
    return ids


def forward_ids(model: MoEModel, ids: np.ndarray, act: ActQuant | None = None,
                upto: int | None = None, with_logits: bool = True):
    """Forward distinct token ids (no dedup). Returns (log_probs or None, block records)."""
    cfg = model.config
    h = model.embed[ids]
    records: list[BlockRecord] = []
    layers = model.layers if upto is None else model.layers[:upto]
    for layer in layers:
        y, trace = moe_forward(layer, h, eps=cfg.eps, k=cfg.k, gate_mode=cfg.gate_mode, act=act)
        records.append(BlockRecord(h, tc.rmsnorm(h, layer.norm_gain, cfg.eps), trace))
        h = h + y
    if not with_logits:
        return None, records
    hn = tc.rmsnorm(h, model.final_gain, cfg.eps)
    return tc.log_softmax_rows(tc.matmul(hn, np.ascontiguousarray(model.embed.T))), records


def lm_forward(model: MoEModel, tokens, act: ActQuant | None = None) -> np.ndarray:
    """Next-token log-probabilities for every position (tokens x vocab).

    The model has no attention, so each position depends on its own id only;
    the forward runs once per distinct id and is gathered back. Every kernel
    is row-independent, so this is bit-identical to a position-by-position pass.
    """
    ids = _check_tokens(model, tokens)
    uniq, inverse = np.unique(ids, return_inverse=True)
    logp, _ = forward_ids(model, uniq, act)
    return logp[inverse]


def block_records(model: MoEModel, tokens, act: ActQuant | None = None,
                  upto: int | None = None) -> tuple[np.ndarray, np.ndarray, list[BlockRecord]]:
    """Per-layer inputs and traces over the distinct ids of ``tokens``.

    Returns (unique ids, multiplicity of each id, records indexed by unique id).
    """
    ids = _check_tokens(model, tokens)
    uniq, counts = np.unique(ids, return_counts=True)
    _, records = forward_ids(model, uniq, act, upto=upto, with_logits=False)
    return uniq, counts, records


@dataclass(frozen=True)
class OutlierSpec:
    channels: tuple[int, ...] = ()
    scales: tuple[float, ...] = ()

    @classmethod
    def uniform(cls, channels, scale: float) -> "OutlierSpec":
        channels = tuple(int(c) for c in channels)
        return cls(channels, tuple(float(scale) for _ in channels))

    def multipliers(self, d: int) -> np.ndarray:
        if len(self.channels) != len(self.scales):
            raise ValueError("outlier channels and scales differ in length")
        m = np.ones(d)
        for c, s in zip(self.channels, self.scales):
            if not 0 <= c < d:
                raise ValueError(f"outlier channel {c} out of range for d={d}")
            if not s > 0:
                raise ValueError(f"outlier scale must be positive, got {s}")
            m[c] = s
        return m


def _f32(a: np.ndarray) -> np.ndarray:
    # keep generated weights exactly representable in the float32 file payload
    return np.ascontiguousarray(a.astype(np.float32).astype(np.float64))


def generate_synthetic(config: MoEConfig, seed: int = 0, outliers: OutlierSpec | None = None,
                       skew: float = 0.0) -> MoEModel:
    """Seeded synthetic MoE LM with injected activation outliers and router skew.

    Outlier channels are scaled in the embedding output, so they reach every MoE
    input through the residual stream; the matching input rows of the router and
    first expert matrices are scaled down so the fp model stays well conditioned.
    Router biases ``-skew * ln(i + 1)`` give power-law expert popularity.
    """
    if skew < 0:
        raise ValueError("skew must be non-negative")
    cfg = config
    d, n, h = cfg.d, cfg.n, cfg.hidden
    mult = (outliers or OutlierSpec()).multipliers(d)
    rms0 = float(np.sqrt(np.mean(mult**2)))
    rng = np.random.default_rng(seed)

    embed = rng.standard_normal((cfg.vocab, d))
    hot = mult != 1.0
    # outlier channels carry a large, sign-consistent magnitude on every token
    embed[:, hot] = (1.0 + OUTLIER_JITTER * embed[:, hot]) * mult[hot]
    layers = []
    for _ in range(cfg.layers):
        g = rng.standard_normal((d, n))
        if n <= d:
            q, r = np.linalg.qr(g)
            g = q * np.sign(np.diag(r))
        else:
            g = g / np.linalg.norm(g, axis=0)
        router = g * (ROUTER_LOGIT_STD * rms0) / mult[:, None]
        bias = -skew * np.log(np.arange(1, n + 1, dtype=np.float64))
        experts = []
        for _ in range(n):
            w1 = rng.standard_normal((d, h)) * (rms0 / np.sqrt(d)) / mult[:, None]
            w2 = rng.standard_normal((h, d)) * (EXPERT_OUT_STD / np.sqrt(h))
            experts.append(Expert(_f32(w1), _f32(w2)))
        layers.append(MoELayer(np.ones(d), _f32(router), experts, _f32(bias)))
    # random signs keep the tied projection from favouring the input token itself
    signs = np.where(rng.random(d) < 0.5, -1.0, 1.0)
    final_gain = signs * LOGIT_TEMPERATURE * rms0 / mult**2
    return MoEModel(cfg, _f32(embed), layers, _f32(final_gain))


def copy_model(model: MoEModel, **changes) -> MoEModel:
    layers = [
        MoELayer(l.norm_gain.copy(), l.router.copy(),
                 [Expert(e.w1.copy(), e.w2.copy()) for e in l.experts], l.router_bias.copy())
        for l in model.layers
    ]
    base = MoEModel(model.config, model.embed.copy(), layers, model.final_gain.copy())
    return replace(base, **changes) if changes else base
