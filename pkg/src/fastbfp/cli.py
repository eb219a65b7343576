"""``fastbfp`` command-line entry point.

Exit codes: 0 on success, 1 when a training run diverges, 2 for usage and
validation errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .errors import BfpError, Divergence
from .fmac import bfp_dot, chunked_dot, pass_count, trace_csv
from .numerics import (
    DEFAULT_EXPONENT_BITS,
    DEFAULT_GROUP_SIZE,
    RoundingMode,
    exponent_spread_histogram,
    histogram_csv,
    make_rng,
    quantize_group,
    quantize_tensor,
)
from .report import heatmap, heatmap_csv
from .storage import bits_per_value
from .systolic import OPERAND_AXES, ArrayConfig, CostModelParams, Mode, SystolicArray, SystolicJob
from .tensor_io import read_bfp, read_tensor, write_bfp, write_tensor
from .training.harness import RunRecord, TrainConfig, run_many, time_to_accuracy, tta_csv

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def load_array(path: str) -> tuple[np.ndarray, int | None]:
    """A dense tensor from ``.npy`` or raw data with a JSON sidecar."""
    if path.endswith(".npy"):
        return np.load(path), None
    arr, meta = read_tensor(path)
    return arr, meta.get("axis")


def _rounding(args: argparse.Namespace) -> RoundingMode:
    return RoundingMode.parse(args.mode, args.noise_bits)


def _format_args(p: argparse.ArgumentParser, m_flags: tuple[str, ...] = ("--m",)) -> None:
    for flag in m_flags:
        p.add_argument(flag, type=int, default=4, help="mantissa bits (default 4)")
    p.add_argument("--g", type=int, default=DEFAULT_GROUP_SIZE, help="group size (default 16)")
    p.add_argument("--e-bits", type=int, default=DEFAULT_EXPONENT_BITS, help="stored exponent bits (default 3)")
    p.add_argument("--mode", default="nearest", choices=["truncate", "nearest", "stochastic"])
    p.add_argument("--noise-bits", type=int, default=3, help="random bits for stochastic rounding")
    p.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------------------
# quantize


def cmd_quantize(args: argparse.Namespace) -> int:
    x, axis = load_array(args.input)
    if args.axis is not None:
        axis = args.axis
    axis = -1 if axis is None else axis
    rng = make_rng(args.seed)
    t = quantize_tensor(x, args.m, args.g, _rounding(args), rng, axis, args.e_bits)
    write_bfp(args.output, t)
    deq = read_bfp(args.output).dequantize()
    err = np.abs(deq.astype(np.float64) - x.astype(np.float64))
    stats = {
        "mean_abs_error": float(err.mean()) if err.size else 0.0,
        "max_abs_error": float(err.max()) if err.size else 0.0,
        "bits_per_value": bits_per_value(args.e_bits, args.g, args.m),
        "groups": t.n_groups,
    }
    if args.dequantized:
        write_tensor(args.dequantized, deq, axis=t.axis)
    if args.histogram:
        Path(args.histogram).write_text(histogram_csv(exponent_spread_histogram(x, args.g, axis)))
    print(json.dumps(stats, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# dot


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_dot(args: argparse.Namespace) -> int:
    xs, ys = _values(args.x), _values(args.y)
    if len(xs) != len(ys):
        raise UsageError("x and y need the same number of values")
    g = args.g if args.g else len(xs)
    rng = make_rng(args.seed)
    mode = _rounding(args)
    gx = quantize_group(xs, args.m_x, mode, rng, g)
    gy = quantize_group(ys, args.m_y, mode, rng, g)
    trace: list = []
    chunked = chunked_dot(gx, gy, trace)
    direct = bfp_dot(gx, gy)
    if args.trace:
        Path(args.trace).write_text(trace_csv(trace))
    print(json.dumps({
        "chunked": float(chunked),
        "direct": float(direct),
        "passes": pass_count(args.m_x, args.m_y),
        "bit_exact": chunked == direct,
    }, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    mode = Mode(args.dataflow)
    left, _ = load_array(args.left)
    right, _ = load_array(args.right)
    params = CostModelParams.from_json(Path(args.cost_config).read_text()) if args.cost_config else CostModelParams()
    cfg = ArrayConfig(args.rows, args.cols, args.g)
    rng = make_rng(args.seed)
    la, ra = OPERAND_AXES[mode]
    rounding = _rounding(args)
    lq = quantize_tensor(left, args.m_left, args.g, rounding, rng, la, args.e_bits)
    rq = quantize_tensor(right, args.m_right, args.g, rounding, rng, ra, args.e_bits)
    job = SystolicJob(mode, lq, rq)
    out, report = SystolicArray(cfg, params, keep_tiles=args.tiles).run(job)
    write_tensor(args.output, out)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    print(json.dumps(report.totals(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


_FLAG_TYPES = {int: int, float: float, str: str}
REQUIRED_TRAIN_FIELDS = ("schedule", "iterations")


def _train_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        kind = type(f.default)
        p.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=_FLAG_TYPES[kind], default=None)


def train_config(args: argparse.Namespace) -> TrainConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(base, dict):
            raise UsageError("config file must hold a JSON object")
    for f in fields(TrainConfig):
        value = getattr(args, "cfg_" + f.name)
        if value is not None:
            base[f.name] = value
    missing = [k for k in REQUIRED_TRAIN_FIELDS if k not in base]
    if missing:
        raise UsageError(f"missing config field(s): {', '.join(missing)}")
    return TrainConfig.from_dict(base)


def record_stem(rec: RunRecord) -> str:
    return f"{rec.label}-seed{rec.config['seed']}"


def cmd_train(args: argparse.Namespace) -> int:
    cfg = train_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    configs = [replace(cfg, seed=s) for s in seeds]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = run_many(configs, args.jobs)
    status = EXIT_OK
    for rec in records:
        stem = record_stem(rec)
        (out / f"{stem}.json").write_text(rec.to_json() + "\n")
        (out / f"{stem}-curves.csv").write_text(rec.curves_csv())
        (out / f"{stem}-trace.csv").write_text(rec.trace.to_csv())
        summary = {"run": stem, "final_accuracy": rec.final_accuracy, "diverged": rec.diverged, **rec.cost}
        print(json.dumps(summary))
        if rec.diverged:
            status = EXIT_DIVERGED
    return status


# ---------------------------------------------------------------------------
# report


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = {}
    for path in args.runs:
        rec = RunRecord.from_json(Path(path).read_text())
        records[record_stem(rec)] = rec
    rows = time_to_accuracy(records, args.target)
    (out / "tta.csv").write_text(tta_csv(rows))
    for name, rec in records.items():
        if not rec.trace.rows:
            continue
        n_layers = max(r.layer for r in rec.trace.rows)
        cells = heatmap(rec.trace, rec.config["iterations"], n_layers, args.buckets)
        (out / f"heatmap-{name}.csv").write_text(heatmap_csv(cells))
    for path in args.histogram or []:
        x, axis = load_array(path)
        hist = exponent_spread_histogram(x, args.g, -1 if axis is None else axis)
        (out / f"histogram-{Path(path).stem}.csv").write_text(histogram_csv(hist))
    for row in rows:
        print(",".join(row.cells()))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastbfp", description="Variable-precision BFP tools")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a tensor into a packed BFP file")
    q.add_argument("input", help=".npy file or raw tensor with a JSON sidecar")
    q.add_argument("output", help="FASTBFP1 output path (a .json sidecar is written next to it)")
    _format_args(q)
    q.add_argument("--axis", type=int, default=None, help="grouping axis (default: sidecar value or last)")
    q.add_argument("--dequantized", help="also write the dequantized tensor here")
    q.add_argument("--histogram", help="write the exponent-spread histogram CSV here")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dot", help="one-group dot product through the chunked fMAC")
    d.add_argument("--x", required=True, help="comma-separated values")
    d.add_argument("--y", required=True, help="comma-separated values")
    _format_args(d, ("--m-x", "--m-y"))
    d.set_defaults(g=0)
    d.add_argument("--trace", help="write the per-pass trace CSV here")
    d.set_defaults(func=cmd_dot)

    s = sub.add_parser("simulate", help="run one dataflow on the systolic array")
    s.add_argument("dataflow", choices=[m.value for m in Mode])
    s.add_argument("left")
    s.add_argument("right")
    s.add_argument("output", help="result tensor path (raw float32 + sidecar)")
    _format_args(s, ("--m-left", "--m-right"))
    s.add_argument("--rows", type=int, default=ArrayConfig.rows)
    s.add_argument("--cols", type=int, default=ArrayConfig.cols)
    s.add_argument("--cost-config", help="JSON file with cost-model constants")
    s.add_argument("--report", help="write the cost report JSON here")
    s.add_argument("--tiles", action="store_true", help="include per-tile rows in the report")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="run training experiments")
    t.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    t.add_argument("--out", required=True, help="directory for run records")
    t.add_argument("--seeds", help="comma-separated seeds (overrides --seed)")
    t.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    _train_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="TTA table, heatmaps and histograms")
    r.add_argument("runs", nargs="+", help="run record JSON files")
    r.add_argument("--out", required=True)
    r.add_argument("--target", type=float, required=True, help="validation accuracy target")
    r.add_argument("--buckets", type=int, default=5, help="iteration buckets for heatmaps")
    r.add_argument("--histogram", action="append", help="tensor to histogram (repeatable)")
    r.add_argument("--g", type=int, default=DEFAULT_GROUP_SIZE)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Divergence as exc:
        print(f"fastbfp: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, BfpError, ValueError, KeyError, OSError) as exc:
        print(f"fastbfp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
