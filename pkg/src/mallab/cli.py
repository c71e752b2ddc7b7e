"""Command-line entry point: ``mallab <command> [options]``.

Commands run one pipeline stage each (gen, attribute, train, eval, report);
``run`` chains all of them, ``ablate`` trains and reports the ablation set,
and ``check`` runs the gradient and metric self-checks.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import pipeline, report
from .config import dump_text, load_config, parse_value
from .errors import ConfigError, MalError

COMMANDS = ("gen", "attribute", "train", "eval", "report", "run", "ablate", "check")


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(raw.strip())
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="config file (sectioned key = value)")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key, e.g. --set gen.n_users=2000 (repeatable)")
    common.add_argument("--seed", type=int, metavar="N", help="train and evaluate this single seed only")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="concurrent (variant x seed) jobs")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="mallab", description="Multi-attribution learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen": "generate the synthetic journey log",
        "attribute": "split, fit the MTA model and write sample files",
        "train": "train every (primary, variant, seed) model",
        "eval": "score the test split with every trained model",
        "report": "aggregate metrics into tables and figures",
        "run": "gen, attribute, train, eval and report in order",
        "ablate": "train, evaluate and report MAL against its ablations and Base",
        "check": "run the gradient-check and metric-oracle suites",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def execute(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seeds=(args.seed,))).validate()
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    if args.print_config:
        sys.stdout.write(dump_text(cfg))
        return 0
    cmd, force, jobs = args.command, args.force, args.jobs
    if cmd == "check":
        from .checks import run_checks

        results = run_checks()
        for r in results:
            print(r.line())
        return 0 if all(r.passed for r in results) else 4
    if cmd in ("gen", "run"):
        pipeline.cmd_gen(cfg, force)
    if cmd in ("attribute", "run"):
        pipeline.cmd_attribute(cfg, force)
    if cmd in ("train", "run"):
        pipeline.cmd_train(cfg, jobs, force)
    if cmd in ("eval", "run"):
        pipeline.cmd_eval(cfg, jobs, force)
    if cmd in ("report", "run"):
        out = report.cmd_report(cfg, force)
        print(out / "report.txt")
    if cmd == "ablate":
        variants = list(report.ABLATION_VARIANTS)
        pipeline.cmd_train(cfg, jobs, force, variants)
        pipeline.cmd_eval(cfg, jobs, force, variants)
        out = report.cmd_ablation_report(cfg, force)
        print(out / "report.txt")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return execute(args)
    except MalError as exc:
        print(f"mallab: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
