"""Router weight calibration against logit MSE plus a top-m routing KL term."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor_core as tc
from .quantizer import QuantParams, QuantSpec, fake_quantize, minmax_params, search_params

HOLDOUT_EVERY = 5


@dataclass(frozen=True)
class RouterCalibConfig:
    kl_lambda: float = 1.0
    kl_ratio: float = 0.0
    k: int = 2
    grid: tuple | None = None

    def __post_init__(self):
        if self.kl_lambda < 0:
            raise ValueError("kl_lambda must be non-negative")
        if not 0.0 <= self.kl_ratio <= 1.0:
            raise ValueError("kl_ratio must lie in [0, 1]")


def kl_subset_size(n: int, k: int, ratio: float) -> int:
    return k + int((n - k) * ratio)


def kl_expert_subset(fp_logits, k: int, ratio: float) -> np.ndarray:
    """Indices of the top-m experts by full-precision logit, m = k + int((n - k) * ratio)."""
    row = np.asarray(fp_logits, dtype=np.float64).reshape(1, -1)
    return tc.topk_rows(row, kl_subset_size(row.shape[1], k, ratio))[0]


class DualObjective:
    """Weighted mean over tokens of ||l_fp - l_q||^2 + lambda * KL(p_fp || p_q).

    Both distributions are softmaxes over each token's top-m fp experts. The
    quantized logits are cached per column, so a call that changes one
    group's params recomputes a single column.
    """

    def __init__(self, x, w_gate, spec: QuantSpec, config: RouterCalibConfig, bias=None, weights=None):
        self.x = tc.as_matrix(x)
        if self.x.shape[0] == 0:
            raise ValueError("empty calibration set")
        self.w = tc.as_matrix(w_gate)
        if spec.granularity != "per-channel":
            raise ValueError("router weights use per-channel (per-expert column) quantization")
        self.spec = spec
        self.config = config
        n = self.w.shape[1]
        self.bias = np.zeros(n) if bias is None else np.asarray(bias, dtype=np.float64)
        wts = np.ones(self.x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
        self.weights = wts / wts.sum()
        self.fp = tc.matmul(self.x, self.w) + self.bias
        self.subset = tc.topk_rows(self.fp, kl_subset_size(n, config.k, config.kl_ratio))
        self.p_fp = tc.softmax_rows(np.take_along_axis(self.fp, self.subset, axis=1))
        self._params: QuantParams | None = None
        self._wq = None
        self._logits = None

    def logits(self, params: QuantParams) -> np.ndarray:
        if self._params is None:
            self._wq = fake_quantize(self.w, params, self.spec)
            self._logits = tc.matmul(self.x, self._wq) + self.bias
        else:
            changed = np.nonzero((params.scale != self._params.scale) | (params.zero != self._params.zero))[0]
            for g in changed:
                one = QuantParams(params.scale[g : g + 1], params.zero[g : g + 1])
                self._wq[:, g : g + 1] = fake_quantize(self.w[:, g : g + 1], one, self.spec)
                self._logits[:, g : g + 1] = tc.matmul(self.x, self._wq[:, g : g + 1]) + self.bias[g]
        self._params = params.copy()
        return self._logits

    def terms(self, params: QuantParams) -> tuple[np.ndarray, np.ndarray]:
        lq = self.logits(params)
        mse = np.sum((self.fp - lq) ** 2, axis=1)
        p_q = tc.softmax_rows(np.take_along_axis(lq, self.subset, axis=1))
        return mse, tc.kl_rows(self.p_fp, p_q)

    def __call__(self, params: QuantParams) -> float:
        mse, kl = self.terms(params)
        if self.config.kl_lambda == 0:
            return float(self.weights @ mse)
        return float(self.weights @ mse + self.config.kl_lambda * (self.weights @ kl))


def dual_objective(x_calib, w_gate, params: QuantParams, spec: QuantSpec, config: RouterCalibConfig,
                   bias=None, weights=None) -> float:
    return DualObjective(x_calib, w_gate, spec, config, bias, weights)(params)


@dataclass
class SplitMetrics:
    objective: float
    logit_mse: float
    kl: float
    topk_agreement: float
    top1_agreement: float


def split_metrics(obj: DualObjective, params: QuantParams) -> SplitMetrics:
    mse, kl = obj.terms(params)
    lq = obj.logits(params)
    fp_top = tc.topk_rows(obj.fp, obj.config.k)
    q_top = tc.topk_rows(lq, obj.config.k)
    w = obj.weights
    lam = obj.config.kl_lambda
    return SplitMetrics(
        objective=float(w @ mse + lam * (w @ kl)),
        logit_mse=float(w @ mse),
        kl=float(w @ kl),
        topk_agreement=float(w @ np.all(np.sort(fp_top, axis=1) == np.sort(q_top, axis=1), axis=1)),
        top1_agreement=float(w @ (fp_top[:, 0] == q_top[:, 0])),
    )


@dataclass
class AlignmentReport:
    """Before = minmax initialization, after = calibrated params."""

    heldout_before: SplitMetrics
    heldout_after: SplitMetrics
    calib_before: SplitMetrics
    calib_after: SplitMetrics
    heldout_tokens: int
    calib_tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


def holdout_split(tokens, ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (optimization, held-out) counts; every 5th stream position is held out.

    With ``ids`` the rows are those distinct token ids and each count is the
    number of stream positions of that id in the split; otherwise rows are the
    stream positions themselves.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    held = np.arange(tokens.size) % HOLDOUT_EVERY == HOLDOUT_EVERY - 1
    if ids is None:
        return (~held).astype(np.float64), held.astype(np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    pos = np.searchsorted(ids, tokens)
    if np.any(pos >= ids.size) or np.any(ids[np.minimum(pos, ids.size - 1)] != tokens):
        raise ValueError("ids must be sorted and cover every token")
    opt = np.bincount(pos[~held], minlength=ids.size).astype(np.float64)
    return opt, np.bincount(pos[held], minlength=ids.size).astype(np.float64)


def calibrate_router(x_calib, w_gate, spec: QuantSpec, config: RouterCalibConfig, bias=None, *,
                     split=None, align: bool = True) -> tuple[QuantParams, AlignmentReport]:
    """Search the router's per-expert scales/zero-points under the dual objective.

    Rows of ``x_calib`` are calibration tokens in stream order, and every 5th is
    held out for the report. ``split`` overrides that with explicit per-row
    (optimization, held-out) weights, e.g. from :func:`holdout_split` on
    de-duplicated rows. With ``align=False`` the minmax params are kept and the
    report compares them with themselves.
    """
    x = tc.as_matrix(x_calib)
    if x.shape[0] == 0:
        raise ValueError("empty calibration set")
    opt_w, held_w = holdout_split(np.zeros(x.shape[0])) if split is None else map(np.asarray, split)
    if opt_w.shape != (x.shape[0],) or held_w.shape != (x.shape[0],):
        raise ValueError("split weights must have one entry per row")
    if held_w.sum() == 0 or opt_w.sum() == 0:
        # too few tokens to hold any out; report on the optimization rows
        opt_w = held_w = opt_w + held_w
    keep_opt, keep_held = opt_w > 0, held_w > 0
    opt = DualObjective(x[keep_opt], w_gate, spec, config, bias, opt_w[keep_opt])
    held = DualObjective(x[keep_held], w_gate, spec, config, bias, held_w[keep_held])

    init = minmax_params(w_gate, spec)
    params = search_params(w_gate, spec, opt, config.grid) if align else init.copy()
    report = AlignmentReport(
        heldout_before=split_metrics(held, init), heldout_after=split_metrics(held, params),
        calib_before=split_metrics(opt, init), calib_after=split_metrics(opt, params),
        heldout_tokens=int(held_w.sum()), calib_tokens=int(opt_w.sum()),
    )
    return params, report
