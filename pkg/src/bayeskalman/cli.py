"""``bayeskalman`` command line: generate, train, evaluate, sweep, single, bench, plot.

Exit status is 0 on success. On failure a single JSON object
``{"error": <kind>, "message": <text>}`` is written to stderr and the exit
status is 2 for configuration problems and 1 for anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import experiments as ex
from .errors import BayesKalmanError, ConfigError
from .plotting import emit_svg_line_plot


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = cfg.with_seed(args.seed)
    return cfg


def _progress(args):
    if not args.verbose:
        return None

    def report(name, row):
        print(f"[{name}] epoch {row['epoch']}: train {row['train_loss']:.4g} val {row['val_loss']:.4g}",
              file=sys.stderr)

    return report


def cmd_generate(args, cfg):
    data = ex.build_data(cfg)
    ex.write_config(cfg, args.out)
    return {"datasets": [str(p) for p in ex.write_datasets(cfg, data, args.out)]}


def cmd_train(args, cfg):
    data = ex.build_data(cfg)
    ex.write_config(cfg, args.out)
    nets = ex.train_filters(cfg, data, cfg.out_dir(args.out), _progress(args))
    return {"checkpoints": [str(cfg.out_dir(args.out) / "checkpoints" / f"{n}.json") for n in nets]}


def cmd_evaluate(args, cfg):
    result = ex.run_evaluate(cfg, args.out)
    return {"table": str(cfg.out_dir(args.out) / "eval.csv"), "errors": len(result.errors)}


def cmd_sweep(args, cfg):
    result = ex.run_sweep(cfg, args.out, _progress(args))
    return {"table": str(cfg.out_dir(args.out) / "sweep.csv"), "errors": len(result.errors)}


def cmd_single(args, cfg):
    out = ex.run_single(cfg, args.out, _progress(args), trajectory=args.trajectory)
    return {"files": {k: str(v) for k, v in out.get("paths", {}).items()}, "errors": len(out["errors"])}


def cmd_bench(args, cfg):
    rows = ex.run_bench(cfg, args.out, args.checkpoints)
    return {"table": str(cfg.out_dir(args.out) / "bench.csv"), "rows": len(rows)}


def cmd_plot(args, cfg):
    """Render a long-format CSV (one row per point) as an SVG line plot."""
    src = Path(args.csv)
    with src.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{src} has no data rows")
    for col in (args.x, args.y) + ((args.group,) if args.group else ()):
        if col not in rows[0]:
            raise ConfigError(f"column {col!r} not in {src}")
    series = {}
    for row in rows:
        xs, ys = series.setdefault(row[args.group] if args.group else args.y, ([], []))
        xs.append(float(row[args.x]))
        ys.append(float(row[args.y]))
    target = cfg.out_dir(args.out) / "plots" / f"{src.stem}_{args.y}.svg"
    return {"svg": str(emit_svg_line_plot(series, args.x, args.y, target, title=src.stem))}


COMMANDS = {
    "generate": (cmd_generate, "simulate and save the train/validation/test datasets"),
    "train": (cmd_train, "train the configured learned filters and save checkpoints"),
    "evaluate": (cmd_evaluate, "evaluate saved checkpoints on the test sets"),
    "sweep": (cmd_sweep, "train once over the SNR grid and evaluate every filter at each point"),
    "single": (cmd_single, "single-run tracks and APEC/EEC traces (cv scenario)"),
    "bench": (cmd_bench, "per-trajectory latency of each filter"),
    "plot": (cmd_plot, "draw an SVG from a long-format CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayeskalman", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="runs", help="output root; files go to <out>/<name>/")
        p.add_argument("-v", "--verbose", action="store_true", help="print training progress to stderr")
        if name == "single":
            p.add_argument("--trajectory", type=int, default=0, help="test trajectory to plot")
        if name == "bench":
            p.add_argument("--checkpoints", help="directory of trained checkpoints to time")
        if name == "plot":
            p.add_argument("--csv", required=True, help="input CSV")
            p.add_argument("--x", required=True, help="x column")
            p.add_argument("--y", required=True, help="y column")
            p.add_argument("--group", help="column naming the series")
    return parser


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        summary = COMMANDS[args.command][0](args, cfg)
    except ConfigError as err:
        return _fail("config", str(err), 2)
    except (BayesKalmanError, OSError, ValueError, ArithmeticError) as err:
        return _fail(type(err).__name__, str(err), 1)
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
