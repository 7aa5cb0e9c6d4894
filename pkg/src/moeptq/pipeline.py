"""End-to-end quantization pipeline, evaluation metrics and ablation sweeps.

Stage order: channel stats -> expert-aware smoothing -> router calibration ->
calibration balance -> expert weight quantization -> evaluation. Each of the
three method components can be switched off, in which case its stage is an
identity pass-through (no smoothing, minmax router params, minmax expert
params on the base set).
"""

from __future__ import annotations

import csv
import io as _stdio
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .calib_balance import (BalanceConfig, BalanceResult, CalibrationSet, SyntheticStream, balance,
                            histogram_export, profile)
from .model import ActQuant, Expert, MoELayer, MoEModel, block_records, copy_model, lm_forward
from .quantizer import (QuantizedModel, QuantParams, QuantRecord, QuantSpec, dequantize, minmax_params,
                        quantize, search_params)
from .router_align import RouterCalibConfig, calibrate_router, holdout_split
from .smoothing import AGG_MODES, aggregate_mode, collect_stats, routed_gate_mass, smooth_model

REPORT_NOTE = ("Desk-scale substitution: task accuracy is replaced by perplexity and routing agreement "
               "on a synthetic held-out token stream.")
HESSIAN_DAMP = 0.01
COMPONENTS = ("smooth_aggregate", "router_align", "calib_balance")
_COMPONENT_ALIASES = {"smooth": "smooth_aggregate", "router": "router_align", "balance": "calib_balance"}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")


@dataclass(frozen=True)
class PipelineConfig:
    """Bits of ``None`` mean full precision for that tensor class.

    ``router_abits`` defaults to ``max(router_bits, abits)``, so Rw8a8 with
    A4 experts keeps an 8-bit router input while Rw3a4 gets 4 bits.
    """

    wbits: int | None = 4
    abits: int | None = 4
    router_bits: int | None = 8
    router_abits: int | None = None
    symmetric: bool = False
    alpha: float = 0.5
    agg_mode: str = "maximum"
    kl_lambda: float = 1.0
    kl_ratio: float = 0.0
    balance_ratio: float = 2.0
    budget: int = 100
    batch_seqs: int = 16
    sampler: str | None = None  # default synthetic:<seed>
    smooth_aggregate: bool = True
    router_align: bool = True
    calib_balance: bool = True
    seed: int = 0
    eval_seqs: int = 32
    eval_len: int = 128

    def __post_init__(self):
        if self.agg_mode not in AGG_MODES:
            raise ValueError(f"unknown aggregation mode {self.agg_mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("wbits", "abits", "router_bits", "router_abits"):
            b = getattr(self, name)
            if b is not None and b not in (3, 4, 8):
                raise ValueError(f"{name} must be 3, 4, 8 or None (full precision)")
        RouterCalibConfig(self.kl_lambda, self.kl_ratio)
        BalanceConfig(self.balance_ratio, self.budget, self.batch_seqs)
        if self.eval_seqs < 1 or self.eval_len < 2:
            raise ValueError("evaluation stream needs at least one sequence of length >= 2")

    @property
    def resolved_router_abits(self) -> int | None:
        if self.router_abits is not None:
            return self.router_abits
        if self.abits is None:
            return None
        return max(self.router_bits or self.abits, self.abits)

    @property
    def act(self) -> ActQuant:
        return ActQuant(self.abits, self.resolved_router_abits, self.symmetric)

    def with_components(self, enabled) -> "PipelineConfig":
        on = {_COMPONENT_ALIASES.get(c, c) for c in enabled}
        bad = on - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown components {sorted(bad)}")
        return replace(self, **{c: c in on for c in COMPONENTS})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["router_abits"] = self.resolved_router_abits
        out["sampler"] = self.sampler or f"synthetic:{self.seed}"
        return out


@dataclass
class LayerMetrics:
    topk_agreement: float
    top1_agreement: float
    weight_mse: float | None  # None when no pre-quantization reference is at hand
    act_mse: float
    act_mse_per_channel: list[float]


@dataclass
class EvalReport:
    config: dict
    seed: int
    perplexity: float
    perplexity_fp: float
    eval_tokens: int
    layers: list[LayerMetrics]
    router: list[dict] = field(default_factory=list)
    smoothing: list[dict] = field(default_factory=list)
    balance: dict = field(default_factory=dict)
    histogram: str | None = None
    note: str = REPORT_NOTE

    def to_dict(self) -> dict:
        return {"note": self.note, **{k: v for k, v in asdict(self).items() if k != "note"}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def summary_row(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "perplexity_fp": self.perplexity_fp,
            "topk_agreement": float(np.mean([m.topk_agreement for m in self.layers])),
            "top1_agreement": float(np.mean([m.top1_agreement for m in self.layers])),
            "weight_mse": (None if any(m.weight_mse is None for m in self.layers)
                           else float(np.mean([m.weight_mse for m in self.layers]))),
            "act_mse": float(np.mean([m.act_mse for m in self.layers])),
        }


def _as_model(m) -> tuple[MoEModel, ActQuant | None]:
    if isinstance(m, QuantizedModel):
        return m.model, m.act
    return m, None


def perplexity(model, tokens) -> float:
    """exp(mean next-token NLL). ``tokens`` is one sequence or a (num_seqs, len) array."""
    model, act = _as_model(model)
    seqs = np.asarray(tokens, dtype=np.int64)
    if seqs.ndim == 1:
        seqs = seqs.reshape(1, -1)
    if seqs.shape[1] < 2:
        raise ValueError("perplexity needs sequences of length >= 2")
    logp = lm_forward(model, seqs[:, :-1], act)
    nll = -logp[np.arange(logp.shape[0]), seqs[:, 1:].reshape(-1)]
    return float(np.exp(nll.mean()))


def routing_agreement(fp_model, q_model, tokens) -> list[tuple[float, float]]:
    """Per layer: (fraction with identical top-k set, fraction with identical top-1)."""
    fp, fp_act = _as_model(fp_model)
    q, q_act = _as_model(q_model)
    _, counts, rec_fp = block_records(fp, tokens, fp_act)
    _, _, rec_q = block_records(q, tokens, q_act)
    w = counts / counts.sum()
    out = []
    for a, b in zip(rec_fp, rec_q):
        same_set = np.all(np.sort(a.trace.experts, axis=1) == np.sort(b.trace.experts, axis=1), axis=1)
        same_top1 = a.trace.experts[:, 0] == b.trace.experts[:, 0]
        out.append((float(w @ same_set), float(w @ same_top1)))
    return out


def eval_stream(model: MoEModel, config: PipelineConfig) -> np.ndarray:
    return SyntheticStream(model, config.seed, config.eval_len, "eval").next_batch(config.eval_seqs)


def _gram(x: np.ndarray, weights: np.ndarray, dim: int) -> np.ndarray:
    if x.shape[0] == 0:
        return np.eye(dim)
    h = (x * weights[:, None]).T @ x / weights.sum()
    return h + HESSIAN_DAMP * max(float(np.mean(np.diag(h))), tc.SCALE_FLOOR) * np.eye(dim)


def _output_mse_objective(w: np.ndarray, gram: np.ndarray, spec: QuantSpec):
    """Per-column output error (W - Wq)^T H (W - Wq), a separable objective."""

    def objective(params: QuantParams) -> np.ndarray:
        diff = w - dequantize(quantize(w, params, spec), params, spec)
        return np.sum(diff * (gram @ diff), axis=0)

    return objective


def _quantize_tensor(w: np.ndarray, spec: QuantSpec, params: QuantParams) -> QuantRecord:
    return QuantRecord(quantize(w, params, spec), params, spec)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        raise PipelineError(name, exc) from exc


def _smooth(model: MoEModel, base: CalibrationSet, config: PipelineConfig):
    vectors, info = {}, []
    weights_for = None
    if config.agg_mode == "expert_frequency":
        counts = profile(model, base).counts
        weights_for = lambda l: counts[l]  # noqa: E731
    for l in range(model.config.layers):
        stats = collect_stats(model, l, base)
        w = None
        if config.agg_mode == "expert_frequency":
            w = weights_for(l)
        elif config.agg_mode == "router_logits":
            w = routed_gate_mass(model, l, base)
        vec = aggregate_mode(stats, config.alpha, config.agg_mode, w)
        vectors[l] = vec
        info.append(vec.to_dict())
    return smooth_model(model, vectors), info


def _router_stage(model: MoEModel, base: CalibrationSet, config: PipelineConfig):
    spec = QuantSpec(config.router_bits, config.symmetric)
    rcfg = RouterCalibConfig(config.kl_lambda, config.kl_ratio, model.config.k)
    tokens = base.tokens()
    uniq, _, records = block_records(model, tokens)
    split = holdout_split(tokens, uniq)
    out, reports = {}, []
    for l, layer in enumerate(model.layers):
        params, rep = calibrate_router(records[l].normed, layer.router, spec, rcfg, layer.router_bias,
                                       split=split, align=config.router_align)
        out[f"layers.{l}.router"] = _quantize_tensor(layer.router, spec, params)
        reports.append({"layer": l, "aligned": config.router_align, **rep.to_dict()})
    return out, reports


def _expert_stage(model: MoEModel, data: CalibrationSet, config: PipelineConfig, search: bool):
    spec = QuantSpec(config.wbits, config.symmetric)
    uniq, counts, records = block_records(model, data.tokens())
    out = {}
    for l, layer in enumerate(model.layers):
        rec = records[l]
        for i, e in enumerate(layer.experts):
            names = (f"layers.{l}.experts.{i}.w1", f"layers.{l}.experts.{i}.w2")
            if not search:
                for name, w in zip(names, (e.w1, e.w2)):
                    out[name] = _quantize_tensor(w, spec, minmax_params(w, spec))
                continue
            rows = np.nonzero(np.any(rec.trace.experts == i, axis=1))[0]
            x, wts = rec.normed[rows], counts[rows].astype(np.float64)
            hidden = tc.silu(tc.matmul(x, e.w1)) if rows.size else np.zeros((0, e.w1.shape[1]))
            for name, w, inp in zip(names, (e.w1, e.w2), (x, hidden)):
                obj = _output_mse_objective(w, _gram(inp, wts, w.shape[0]), spec)
                out[name] = _quantize_tensor(w, spec, search_params(w, spec, obj))
    return out


def _assemble(model: MoEModel, records: dict[str, QuantRecord], act: ActQuant) -> QuantizedModel:
    qm = copy_model(model)

    def deq(name, w):
        r = records.get(name)
        return w if r is None else dequantize(r.codes, r.params, r.spec)

    layers = []
    for l, layer in enumerate(qm.layers):
        experts = [Expert(deq(f"layers.{l}.experts.{i}.w1", e.w1), deq(f"layers.{l}.experts.{i}.w2", e.w2))
                   for i, e in enumerate(layer.experts)]
        layers.append(MoELayer(layer.norm_gain, deq(f"layers.{l}.router", layer.router), experts,
                               layer.router_bias))
    qm.layers = layers
    return QuantizedModel(qm, act, dict(sorted(records.items())))


def layer_metrics(fp: MoEModel, qm, tokens, reference: MoEModel | None = None) -> list[LayerMetrics]:
    """Routing agreement against ``fp``, weight MSE against ``reference`` (the
    smoothed pre-quantization weights) and per-token activation quantization
    MSE, each in the quantized tensor's own domain."""
    if not isinstance(qm, QuantizedModel):
        qm = QuantizedModel(qm)
    agreement = routing_agreement(fp, qm, tokens)
    _, counts, records = block_records(qm.model, tokens, qm.act)
    w = counts / counts.sum()
    out = []
    for l, layer in enumerate(qm.model.layers):
        wmse = None
        if reference is not None:
            ref = reference.layers[l]
            pairs = [(ref.router, layer.router)] + [(a.w1, b.w1) for a, b in zip(ref.experts, layer.experts)] \
                + [(a.w2, b.w2) for a, b in zip(ref.experts, layer.experts)]
            wmse = float(np.mean([np.mean((a - b) ** 2) for a, b in pairs]))
        x = records[l].normed
        bits = qm.act.expert_bits
        err = np.zeros_like(x) if bits is None else x - tc.fake_quant_rows(x, bits, qm.act.symmetric)[0]
        per_channel = w @ err**2
        out.append(LayerMetrics(agreement[l][0], agreement[l][1], wmse, float(per_channel.mean()),
                                [float(v) for v in per_channel]))
    return out


def evaluate(fp: MoEModel, qm, tokens, config: dict, seed: int, reference: MoEModel | None = None,
             **extra) -> EvalReport:
    tokens = np.asarray(tokens, dtype=np.int64)
    return EvalReport(config=config, seed=seed, perplexity=perplexity(qm, tokens),
                      perplexity_fp=perplexity(fp, tokens), eval_tokens=int(tokens.size),
                      layers=layer_metrics(fp, qm, tokens, reference), **extra)


def run_pipeline(model: MoEModel, calib, config: PipelineConfig | None = None, eval_tokens=None,
                 histogram_path=None) -> tuple[QuantizedModel, EvalReport]:
    config = config or PipelineConfig()
    base = calib if isinstance(calib, CalibrationSet) else CalibrationSet.from_array(calib)
    base = base.base()
    if base.N == 0:
        raise PipelineError("stats", ValueError("calibration set is empty"))

    smoothed, smooth_info = model, []
    if config.smooth_aggregate:
        smoothed, smooth_info = _stage("smooth_aggregate", _smooth, model, base, config)

    records, router_info = {}, []
    if config.router_bits is not None:
        records, router_info = _stage("router_align", _router_stage, smoothed, base, config)

    data, balance_info, prof = base, {"enabled": config.calib_balance}, None
    if config.calib_balance:
        bcfg = BalanceConfig(config.balance_ratio, config.budget, config.batch_seqs,
                             config.sampler or f"synthetic:{config.seed}")
        # the smoothed model routes exactly like the fp one; profile the fp weights
        res: BalanceResult = _stage("calib_balance", balance, model, base, bcfg)
        data, prof = res.data, res.profile
        balance_info.update(threshold=res.threshold, batches=res.batches, base_tokens=base.N,
                            expert_tokens=res.data.expert().N, min_count=int(prof.counts.min()))

    if config.wbits is not None:
        records.update(_stage("quantize", _expert_stage, smoothed, data, config, config.calib_balance))
    qm = _stage("quantize", _assemble, smoothed, records, config.act)

    hist = None
    if histogram_path is not None:
        prof = prof or _stage("profile", profile, model, base)
        hist = str(histogram_export(prof, histogram_path))

    tokens = eval_stream(model, config) if eval_tokens is None else np.asarray(eval_tokens, dtype=np.int64)

    report = _stage("eval", evaluate, model, qm, tokens, config.to_dict(), config.seed, smoothed,
                    router=router_info, smoothing=smooth_info, balance=balance_info, histogram=hist)
    return qm, report


SWEEP_AXES = {
    "balance-ratio": ("balance_ratio", float),
    "kl-ratio": ("kl_ratio", float),
    "kl-lambda": ("kl_lambda", float),
    "agg-mode": ("agg_mode", str),
    "alpha": ("alpha", float),
    "router-bits": ("router_bits", int),
    "wbits": ("wbits", int),
    "abits": ("abits", int),
    "components": (None, str),
}


def sweep_config(config: PipelineConfig, axis: str, value) -> PipelineConfig:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    name, cast = SWEEP_AXES[axis]
    if name is None:
        text = str(value)
        parts = [] if text == "none" else list(COMPONENTS) if text == "all" else text.split("+")
        return config.with_components(parts)
    return replace(config, **{name: cast(value)})


@dataclass
class SweepRow:
    axis: str
    value: str
    report: EvalReport


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MOEPTQ_THREADS", "1")))
    except ValueError:
        return 1


def ablation_sweep(model: MoEModel, calib, axis: str, values, config: PipelineConfig | None = None,
                   eval_tokens=None) -> list[SweepRow]:
    """One pipeline run per value with everything else (seed included) shared."""
    config = config or PipelineConfig()
    cfgs = [sweep_config(config, axis, v) for v in values]
    tokens = eval_stream(model, config) if eval_tokens is None else eval_tokens

    def cell(c):
        return run_pipeline(model, calib, c, eval_tokens=tokens)[1]

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        reports = list(pool.map(cell, cfgs))
    return [SweepRow(axis, str(v), r) for v, r in zip(values, reports)]


SWEEP_FIELDS = ("axis", "value", "perplexity", "perplexity_fp", "topk_agreement", "top1_agreement",
                "weight_mse", "act_mse")


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in rows:
        s = r.report.summary_row()
        w.writerow([r.axis, r.value] + [repr(s[f]) for f in SWEEP_FIELDS[2:]])
    return buf.getvalue()


def sweep_json(rows: list[SweepRow]) -> str:
    out = [{"axis": r.axis, "value": r.value, "report": r.report.to_dict()} for r in rows]
    return json.dumps(out, sort_keys=True, indent=2) + "\n"
