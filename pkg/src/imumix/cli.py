"""Command-line entry point: ``imumix <stage> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import ImuMixError

log = logging.getLogger("imumix")


def _load(args) -> pipeline.PipelineConfig:
    if args.config:
        return pipeline.PipelineConfig.load(args.config, seed=args.seed, out=args.out)
    return pipeline.PipelineConfig.from_dict(pipeline.desk_config(), seed=args.seed, out=args.out)


def _synth(cfg):
    for p in pipeline.cmd_synth(cfg):
        print(f"wrote {p}")


def _preprocess(cfg):
    for d in pipeline.cmd_preprocess(cfg):
        print(f"domain {d.id} {d.name}: {d.size} windows {d.label_histogram()}")


def _reference(cfg):
    s = pipeline.cmd_reference(cfg)
    print(f"reference: {s['rows']} baseline rows, masked MSE {s['initial_mean_loss']:.4f} -> "
          f"{s['final_mean_loss']:.4f} ({100 * s['reduction']:.1f}% lower)")


def _optimize(cfg):
    r = pipeline.cmd_optimize(cfg)
    for name, w in zip(r.trajectory.names, r.weights.alpha):
        print(f"weight {name}: {w:.6f}")


def _mix(cfg):
    m = pipeline.cmd_mix(cfg)
    print(f"mixture: N={m.plan.total}, counts={m.plan.counts.tolist()}, "
          f"usage fraction {m.plan.usage_fraction:.6f}")


def _run_all(cfg):
    rep = pipeline.cmd_run_all(cfg)
    for stage, sec in rep["durations_seconds"].items():
        print(f"{stage}: {sec:.1f} s")
    print(f"report: {cfg.out / 'report.json'}")


def _report(cfg):
    print(json.dumps(pipeline.build_report(cfg), indent=2, sort_keys=True))


COMMANDS = {
    "synth": _synth,
    "preprocess": _preprocess,
    "reference": _reference,
    "optimize": _optimize,
    "mix": _mix,
    "run-all": _run_all,
    "report": _report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline JSON config (default: built-in synthetic desk config)")
    common.add_argument("--seed", type=int, help="top-level seed; overrides the config")
    common.add_argument("--out", help="output directory; overrides the config")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="imumix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print(f"imumix {args.command}: error: seed must be non-negative", file=sys.stderr)
        return 2
    try:
        cfg = _load(args)
        COMMANDS[args.command](cfg)
    except ImuMixError as e:
        stage = getattr(e, "stage", args.command)
        print(f"imumix {stage}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
