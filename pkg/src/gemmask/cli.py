"""Command-line interface.

Subcommands: ``build-mask`` (snapshot + gradients -> mask file +
allocation JSON), ``train`` (config -> report directory), ``report``
(recompute aggregates from a run directory), ``inspect`` (summarize a
mask file). Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, model_store
from .mask_engine import load_masks, save_masks
from .strategies import STRATEGIES, EXTRA_STRATEGIES, StrategySpec, make_mask

USAGE_ERROR = 1
DATA_ERROR = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the CLI contract reserves 2 for
    # data errors, so remap.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="gemmask", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-mask", parents=[], help="build a mask file from weight/gradient snapshots")
    p.add_argument("--weights", required=True, help="weights manifest (or directory containing manifest.json)")
    p.add_argument("--grads", required=True, help="gradients manifest (or directory)")
    p.add_argument("--ratio", required=True, type=float, help="tuning ratio r in (0, 1]")
    p.add_argument("--strategy", default="gem", choices=sorted(STRATEGIES + EXTRA_STRATEGIES))
    p.add_argument("--out", required=True, help="output mask file path")
    p.add_argument("--eps", type=float, default=1e-12, help="denominator clamp for the score")
    p.add_argument("--seed", type=int, default=None, help="seed (required for the random strategy)")

    p = sub.add_parser("train", help="run a full experiment grid from a JSON config")
    p.add_argument("--config", required=True, help="experiment config JSON")

    p = sub.add_parser("report", help="recompute aggregate CSVs from a run directory")
    p.add_argument("run_dir", help="directory written by `gemmask train`")

    p = sub.add_parser("inspect", help="summarize a mask file")
    p.add_argument("mask_file")
    return parser


def _fmt(value, digits=6) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}g}"
    return str(value)


def _cmd_build_mask(args) -> int:
    w0 = model_store.load_snapshot(args.weights)
    g0 = model_store.load_gradients(args.grads)
    spec = StrategySpec(name=args.strategy, ratio=args.ratio, eps=args.eps, seed=args.seed)
    masks = make_mask(spec, w0, g0, gradient_source=str(args.grads))
    out = Path(args.out)
    save_masks(masks, out)
    plan = masks.provenance.get("plan")
    alloc_path = out.with_name(out.stem + ".alloc.json")
    alloc_path.write_text(json.dumps(plan, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out} and {alloc_path}")
    print(f"strategy={spec.name} ratio={spec.ratio} total_budget={masks.total_selected}")
    for m in masks.masks:
        print(f"  {m.layer_name}: k={m.count}")
    return 0


def _cmd_train(args) -> int:
    config = harness.load_config(args.config)
    report = harness.run_experiment(config)
    print(f"wrote report to {config.output_dir} ({len(report.cells)} cells)")
    _print_aggregates(report.aggregates)
    return 0


def _cmd_report(args) -> int:
    aggregates = harness.rebuild_report(args.run_dir)
    _print_aggregates(aggregates)
    return 0


def _print_aggregates(aggregates) -> None:
    print(f"{'strategy':<20} {'ratio':>8} {'metric (mean+/-std)':>24} {'captured share':>18}")
    for row in aggregates:
        if row.final_metric_mean is None:
            metric = "-"
        else:
            metric = f"{row.final_metric_mean:.4f}+/-{row.final_metric_std:.4f}"
        share = f"{row.captured_share_mean:.4f}+/-{row.captured_share_std:.4f}"
        print(f"{row.strategy:<20} {row.ratio:>8g} {metric:>24} {share:>18}")


def _cmd_inspect(args) -> int:
    masks = load_masks(args.mask_file)
    prov = masks.provenance
    print(f"strategy={prov.get('strategy')} ratio={prov.get('ratio')} eps={prov.get('eps')} "
          f"seed={prov.get('seed')}")
    print(f"gradient source: {prov.get('gradient_source')}")
    print(f"layers={len(masks.masks)} total_selected={masks.total_selected}")
    plan = prov.get("plan") or {}
    rows = {r["name"]: r for r in plan.get("layers", [])}
    print(f"{'layer':<24} {'shape':<14} {'k':>8} {'share':>12} {'entropy':>12}")
    for m in masks.masks:
        row = rows.get(m.layer_name, {})
        shape = "x".join(str(d) for d in m.shape)
        print(f"{m.layer_name:<24} {shape:<14} {m.count:>8} "
              f"{_fmt(row.get('share')):>12} {_fmt(row.get('entropy')):>12}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "build-mask": _cmd_build_mask,
        "train": _cmd_train,
        "report": _cmd_report,
        "inspect": _cmd_inspect,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"gemmask: error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
