"""Post-training quantization for mixture-of-experts language models."""

from .calib_balance import BalanceConfig, CalibrationSet, balance, profile, synthetic_calibration
from .io import FormatError, load_model, save_model
from .model import ActQuant, MoEConfig, MoEModel, OutlierSpec, generate_synthetic, lm_forward, moe_forward
from .pipeline import PipelineConfig, PipelineError, ablation_sweep, perplexity, routing_agreement, run_pipeline
from .quantizer import QuantParams, QuantSpec, load_quantized, save_quantized
from .router_align import RouterCalibConfig, calibrate_router, dual_objective, kl_expert_subset
from .smoothing import aggregate, aggregate_mode, apply_smoothing
from .tensor_core import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ActQuant", "BalanceConfig", "CalibrationSet", "FormatError", "MoEConfig", "MoEModel",
    "OutlierSpec", "PipelineConfig", "PipelineError", "QuantParams", "QuantSpec", "RouterCalibConfig",
    "ablation_sweep", "aggregate", "aggregate_mode", "apply_smoothing", "balance", "calibrate_router",
    "dual_objective", "generate_synthetic", "kl_expert_subset", "lm_forward", "load_model", "load_quantized",
    "moe_forward", "perplexity", "profile", "routing_agreement", "run_pipeline", "save_model",
    "save_quantized", "synthetic_calibration",
]
