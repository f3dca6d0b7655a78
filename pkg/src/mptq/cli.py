"""Command-line interface: ``mptq <subcommand> [options]``.

Exit status is 0 on success, 2 on usage errors and 1 when a pipeline stage
fails; failures print ``[stage] message`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import container
from .errors import PipelineError
from .pipeline import (
    PipelineConfig,
    allocate,
    dumps,
    emit_report,
    evaluate,
    load_data,
    make_plan,
    make_token_data,
    prepare,
    run_calibration,
    save_data,
    state_from_plan,
)
from .allocation import METRIC_MODES
from .redistribution import STRATEGIES
from .tensor import init_toy_vit

# flag dest -> PipelineConfig field
_CONFIG_FLAGS = {
    "model": "model_path",
    "data": "data_path",
    "samples": "sample_count",
    "mode": "mode",
    "fully_quantized": "fully_quantized",
    "bits": "bits",
    "bw": "bw",
    "ba": "ba",
    "redistribution": "redistribution",
    "metric": "metric_mode",
    "gelu_quantizer": "gelu_quantizer",
    "sensitivity": "sensitivity",
    "seed": "seed",
    "report": "report_path",
}


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="PipelineConfig JSON file; flags below override it")
    p.add_argument("--model", help="model container")
    p.add_argument("--data", help="token data container")
    p.add_argument("--samples", type=int, help="calibration sample count")
    p.add_argument("--mode", choices=("sp", "mp", "fp"))
    p.add_argument("--fully-quantized", action="store_true", default=None, help="also quantize LayerNorm/Softmax inputs")
    p.add_argument("--bits", type=int, help="single-precision bit-width")
    p.add_argument("--bw", type=float, help="mean weight bit-width target (mp)")
    p.add_argument("--ba", type=float, help="mean activation bit-width target (mp)")
    p.add_argument("--redistribution", choices=STRATEGIES)
    p.add_argument("--metric", choices=METRIC_MODES)
    p.add_argument("--gelu-quantizer", choices=("opt-m", "uniform"))
    p.add_argument("--sensitivity", choices=("local", "upstream"))
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="report JSON path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mptq", description="Mixed-precision post-training quantization of a toy ViT")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a seeded toy ViT")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--outlier-gain", type=float, default=4.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write seeded synthetic token data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="collect calibration taps")
    _config_args(p)
    p.add_argument("--out", required=True, help="calibration cache container")

    p = sub.add_parser("allocate", help="compute a bit-width plan")
    _config_args(p)
    p.add_argument("--out", required=True, help="plan JSON")

    p = sub.add_parser("quantize", help="quantize the model and write it with its report")
    _config_args(p)
    p.add_argument("--plan", help="use this plan instead of allocating")
    p.add_argument("--out", required=True, help="quantized model container")

    p = sub.add_parser("eval", help="evaluate a plan (or a fresh allocation) and write the report")
    _config_args(p)
    p.add_argument("--plan")
    p.add_argument("--out", required=True, help="report JSON")

    p = sub.add_parser("report", help="summarize a report JSON")
    p.add_argument("input")
    p.add_argument("--out", help="write the plot-ready summary JSON here")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    try:
        base = json.loads(Path(args.config).read_text()) if args.config else {}
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError("config", f"cannot read {args.config}: {exc}") from exc
    if not isinstance(base, dict):
        raise PipelineError("config", "config file must hold a JSON object")
    for flag, key in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    try:
        return PipelineConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise PipelineError("config", str(exc)) from exc


def _load_inputs(config: PipelineConfig):
    if not config.model_path:
        raise PipelineError("load", "no model given (--model or model_path)")
    if not config.data_path:
        raise PipelineError("load", "no calibration data given (--data or data_path)")
    try:
        model = container.load_model(config.model_path)
        data = load_data(config.data_path)
    except (OSError, ValueError, KeyError) as exc:
        raise PipelineError("load", str(exc)) from exc
    return model, data


def _read_plan(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError("load", f"cannot read plan {path}: {exc}") from exc


def _write(path, fn) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        fn(path)
    except OSError as exc:
        raise PipelineError("write", str(exc)) from exc


def _evaluated(args, config):
    plan = _read_plan(args.plan) if args.plan else None
    if plan is not None:
        # the report describes the plan actually applied
        try:
            config = replace(
                config,
                mode=plan["mode"],
                bw=plan["targets"]["weights"],
                ba=plan["targets"]["activations"],
                metric_mode=plan["metric_mode"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PipelineError("load", f"malformed plan {args.plan}: {exc}") from exc
    model, data = _load_inputs(config)
    prep = prepare(model, data, config)
    state = state_from_plan(prep, plan, config) if plan is not None else allocate(prep, config)
    qmodel, report = evaluate(prep, state, config)
    return qmodel, report, make_plan(state, config)


def _cmd_gen_model(args) -> None:
    try:
        model = init_toy_vit(
            args.seed, depth=args.depth, embed_dim=args.embed_dim, num_heads=args.heads, outlier_gain=args.outlier_gain
        )
    except ValueError as exc:
        raise PipelineError("gen-model", str(exc)) from exc
    _write(args.out, lambda p: container.save_model(model, p))


def _cmd_gen_data(args) -> None:
    try:
        data = make_token_data(args.seed, samples=args.samples, tokens=args.tokens, dim=args.dim)
    except ValueError as exc:
        raise PipelineError("gen-data", str(exc)) from exc
    _write(args.out, lambda p: save_data(data, p))


def _cmd_calibrate(args) -> None:
    config = resolve_config(args)
    model, data = _load_inputs(config)
    cache = run_calibration(model, data, config)
    _write(args.out, cache.save)


def _cmd_allocate(args) -> None:
    config = resolve_config(args)
    model, data = _load_inputs(config)
    prep = prepare(model, data, config)
    plan = make_plan(allocate(prep, config), config)
    _write(args.out, lambda p: Path(p).write_text(dumps(plan)))


def _cmd_quantize(args) -> None:
    config = resolve_config(args)
    qmodel, report, _ = _evaluated(args, config)
    _write(args.out, qmodel.save)
    report_path = config.report_path or str(Path(args.out).with_suffix(".report.json"))
    _write(report_path, lambda p: emit_report(report, p))


def _cmd_eval(args) -> None:
    config = resolve_config(args)
    _, report, _ = _evaluated(args, config)
    _write(args.out, lambda p: emit_report(report, p))


def summarize(report: dict) -> dict:
    return {
        "end_to_end_sqnr_db": report["end_to_end_sqnr_db"],
        "mean_bits": report["mean_bits"],
        "bit_histogram": report["bit_histogram"],
        "clamping_loss_total": report["clamping_loss"]["total"],
    }


def _cmd_report(args) -> None:
    try:
        report = json.loads(Path(args.input).read_text())
        summary = summarize(report)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise PipelineError("report", f"cannot read report {args.input}: {exc}") from exc
    print(f"end-to-end SQNR: {summary['end_to_end_sqnr_db']} dB")
    print(f"mean bits: W {summary['mean_bits']['weights']:.3f}  A {summary['mean_bits']['activations']:.3f}")
    print(f"{'site':<28} {'kind':<10} {'bits':>4} {'sqnr_db':>9}")
    for row in report["sites"]:
        sq = row["sqnr_db"]
        sq = f"{sq:9.2f}" if isinstance(sq, (int, float)) else f"{sq:>9}"
        print(f"{row['layer_id']:<28} {row['kind']:<10} {row['bits']:>4} {sq}")
    if args.out:
        _write(args.out, lambda p: Path(p).write_text(dumps(summary)))


_COMMANDS = {
    "gen-model": _cmd_gen_model,
    "gen-data": _cmd_gen_data,
    "calibrate": _cmd_calibrate,
    "allocate": _cmd_allocate,
    "quantize": _cmd_quantize,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def cli_main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except PipelineError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main())
