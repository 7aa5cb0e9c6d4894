"""Command-line entry point: ``moeptq <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 I/O or file-format error, 3 pipeline
stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .calib_balance import CalibrationSet, SyntheticStream, histogram_csv, profile, threshold
from .model import GATE_MODES, MoEConfig, OutlierSpec, generate_synthetic
from .pipeline import (SWEEP_AXES, PipelineConfig, PipelineError, ablation_sweep, eval_stream, evaluate,
                       run_pipeline, sweep_config, sweep_csv, sweep_json)
from .quantizer import identity_quantized, load_quantized, save_quantized
from .smoothing import AGG_MODES

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_STAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bits(text: str) -> int | None:
    if text in ("16", "fp", "none"):
        return None
    value = int(text)
    if value not in (3, 4, 8):
        raise argparse.ArgumentTypeError("bits must be 3, 4, 8 or 16 (full precision)")
    return value


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def load_tokens(spec: str, model, default_len: int = 64, stream: str = "calib") -> np.ndarray:
    """A token file path, or ``synthetic:SEED[:NSEQ[:LEN]]`` drawn from the model's chain."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")[1:]
        try:
            seed = int(parts[0]) if parts and parts[0] else 0
            nseq = int(parts[1]) if len(parts) > 1 else 64
            seq_len = int(parts[2]) if len(parts) > 2 else default_len
        except ValueError:
            raise UsageError(f"bad synthetic token spec {spec!r}; use synthetic:SEED[:NSEQ[:LEN]]") from None
        if nseq < 1 or seq_len < 2:
            raise UsageError("synthetic token spec needs NSEQ >= 1 and LEN >= 2")
        return SyntheticStream(model, seed, seq_len, stream).next_batch(nseq)
    seqs = io.read_tokens(spec)
    if seqs.size and seqs.max() >= model.config.vocab:
        raise io.FormatError(f"{spec}: token id {int(seqs.max())} outside vocab {model.config.vocab}")
    return seqs


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_gen_model(args) -> int:
    cfg = MoEConfig(args.d, args.n, args.k, args.hidden, args.layers, args.vocab, args.gate_mode)
    outliers = OutlierSpec.uniform(args.outlier_channels, args.outlier_scale)
    model = generate_synthetic(cfg, args.seed, outliers, args.skew)
    io.save_model(model, args.out)
    _emit({"out": str(args.out), "config": cfg.to_dict(), "seed": args.seed, "skew": args.skew,
           "outlier_channels": list(outliers.channels), "outlier_scale": args.outlier_scale})
    return EXIT_OK


def cmd_gen_tokens(args) -> int:
    model = io.load_model(args.model)
    seqs = SyntheticStream(model, args.seed, args.seq_len, args.stream).next_batch(args.num_seqs)
    io.write_tokens(args.out, seqs)
    _emit({"out": str(args.out), "num_seqs": args.num_seqs, "seq_len": args.seq_len, "seed": args.seed,
           "stream": args.stream})
    return EXIT_OK


def cmd_profile(args) -> int:
    model = io.load_model(args.model)
    prof = profile(model, load_tokens(args.calib, model))
    cfg = model.config
    thr = threshold(args.balance_ratio, prof.tokens, cfg.k, cfg.n)
    if args.out:
        io.atomic_write(args.out, histogram_csv(prof).encode("utf-8"))
    _emit({"tokens": prof.tokens, "k": cfg.k, "threshold": thr, "balance_ratio": args.balance_ratio,
           "counts": prof.counts.tolist(), "below_threshold": int((prof.counts < thr).sum()),
           "histogram": str(args.out) if args.out else None})
    return EXIT_OK


def pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        wbits=args.wbits, abits=args.abits, router_bits=args.router_bits, router_abits=args.router_abits,
        symmetric=args.symmetric, alpha=args.alpha, agg_mode=args.agg_mode, kl_lambda=args.kl_lambda,
        kl_ratio=args.kl_ratio, balance_ratio=args.balance_ratio, budget=args.budget,
        batch_seqs=args.batch_seqs, sampler=args.sampler, smooth_aggregate=not args.no_smooth_aggregate,
        router_align=not args.no_router_align, calib_balance=not args.no_calib_balance, seed=args.seed,
        eval_seqs=args.eval_seqs, eval_len=args.eval_len,
    )


def _eval_tokens(args, model, config: PipelineConfig):
    if args.eval_tokens:
        return load_tokens(args.eval_tokens, model, config.eval_len, "eval")
    return eval_stream(model, config)


def cmd_quantize(args) -> int:
    model = io.load_model(args.model)
    config = pipeline_config(args)
    calib = CalibrationSet.from_array(load_tokens(args.calib, model))
    out = Path(args.out)
    qm, report = run_pipeline(model, calib, config, _eval_tokens(args, model, config),
                              histogram_path=out.with_name(out.name + ".hist.csv"))
    save_quantized(qm, out)
    report_path = out.with_name(out.name + ".report.json")
    io.atomic_write(report_path, report.to_json().encode("utf-8"))
    _emit({"out": str(out), "report": str(report_path), **report.summary_row()})
    return EXIT_OK


def cmd_eval(args) -> int:
    model = io.load_model(args.model)
    qm = load_quantized(args.quantized) if args.quantized else identity_quantized(model)
    if qm.model.config != model.config:
        raise UsageError("quantized model config does not match the fp model")
    tokens = load_tokens(args.tokens, model, 128, "eval")
    source = {"model": str(args.model), "quantized": args.quantized, "tokens": args.tokens}
    report = evaluate(model, qm, tokens, source, args.seed)
    text = report.to_json()
    if args.out:
        io.atomic_write(args.out, text.encode("utf-8"))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = io.load_model(args.model)
    config = pipeline_config(args)
    calib = CalibrationSet.from_array(load_tokens(args.calib, model))
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    try:
        for v in values:
            sweep_config(config, args.axis, v)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = ablation_sweep(model, calib, args.axis, values, config, _eval_tokens(args, model, config))
    out = Path(args.out)
    json_path = out.with_suffix(".json") if out.suffix == ".csv" else out.with_name(out.name + ".json")
    io.atomic_write(out, sweep_csv(rows).encode("utf-8"))
    io.atomic_write(json_path, sweep_json(rows).encode("utf-8"))
    _emit({"out": str(out), "json": str(json_path), "rows": len(rows)})
    return EXIT_OK


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    d = PipelineConfig()
    p.add_argument("--model", required=True, help="full-precision model file")
    p.add_argument("--calib", default="synthetic:0",
                   help="calibration token file or synthetic:SEED[:NSEQ[:LEN]] (default synthetic:0)")
    p.add_argument("--wbits", type=_bits, default=d.wbits, help="expert weight bits: 3, 4, 8 or 16")
    p.add_argument("--abits", type=_bits, default=d.abits, help="activation bits: 3, 4, 8 or 16")
    p.add_argument("--router-bits", type=_bits, default=d.router_bits, help="router weight bits")
    p.add_argument("--router-abits", type=_bits, default=None,
                   help="router input bits (default max(router bits, abits))")
    p.add_argument("--symmetric", action="store_true", help="symmetric grids instead of asymmetric")
    p.add_argument("--alpha", type=float, default=d.alpha, help="migration strength")
    p.add_argument("--agg-mode", choices=AGG_MODES, default=d.agg_mode)
    p.add_argument("--kl-lambda", type=float, default=d.kl_lambda, help="weight of the routing KL term")
    p.add_argument("--kl-ratio", type=float, default=d.kl_ratio, help="r in m = k + int((n - k) * r)")
    p.add_argument("--balance-ratio", type=float, default=d.balance_ratio, help="magnification ratio")
    p.add_argument("--budget", "--balance-budget", dest="budget", type=int, default=d.budget, help="max sampled batches when balancing")
    p.add_argument("--batch-seqs", type=int, default=d.batch_seqs, help="sequences per sampled batch")
    p.add_argument("--sampler", default=None, help="synthetic:SEED or file:PATH (default synthetic:<seed>)")
    p.add_argument("--no-smooth-aggregate", action="store_true")
    p.add_argument("--no-router-align", action="store_true")
    p.add_argument("--no-calib-balance", action="store_true")
    p.add_argument("--eval-tokens", default=None,
                   help="held-out token file or synthetic spec (default: disjoint synthetic eval stream)")
    p.add_argument("--eval-seqs", type=int, default=d.eval_seqs)
    p.add_argument("--eval-len", type=int, default=d.eval_len)
    p.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moeptq", description="Post-training quantization for mixture-of-experts models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    d = MoEConfig()

    p = sub.add_parser("gen-model", help="write a seeded synthetic MoE model")
    p.add_argument("--d", type=int, default=d.d)
    p.add_argument("--n", type=int, default=d.n)
    p.add_argument("--k", type=int, default=d.k)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--layers", type=int, default=d.layers)
    p.add_argument("--vocab", type=int, default=d.vocab)
    p.add_argument("--gate-mode", choices=GATE_MODES, default=d.gate_mode)
    p.add_argument("--outlier-channels", type=_int_list, default=(), help="comma-separated channel indices")
    p.add_argument("--outlier-scale", type=float, default=20.0)
    p.add_argument("--skew", type=float, default=0.0, help="router bias power-law exponent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("gen-tokens", help="sample a token file from a model's own next-token chain")
    p.add_argument("--model", required=True)
    p.add_argument("--num-seqs", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--stream", choices=("calib", "sample", "eval"), default="calib")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tokens)

    p = sub.add_parser("profile", help="per-layer expert activation counts on calibration data")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", default="synthetic:0")
    p.add_argument("--balance-ratio", type=float, default=2.0)
    p.add_argument("--out", default=None, help="histogram CSV path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("quantize", help="run the quantization pipeline")
    _pipeline_flags(p)
    p.add_argument("--out", required=True, help="quantized model path; report and histogram go alongside")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="perplexity and routing agreement of a quantized model")
    p.add_argument("--model", required=True)
    p.add_argument("--quantized", default=None, help="quantized model file (default: the fp model itself)")
    p.add_argument("--tokens", default="synthetic:0:32:128")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one pipeline run per value of an ablation axis")
    _pipeline_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True, help="CSV path; a JSON report list is written next to it")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"moeptq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"moeptq: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, io.FormatError) as exc:
        print(f"moeptq: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"moeptq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
