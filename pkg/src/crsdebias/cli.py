"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure.
All human-readable output goes to standard error; results go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_override
from .dataset import CatalogError
from .pipeline import (
    REPORT_FORMATS,
    StageError,
    config_of,
    emit_report,
    fit_csm_stage,
    new_run_dir,
    prepare,
    report_stage,
    run_ablation,
    run_pipeline,
    simulate_stage,
    train_policy_stage,
    train_recommender_stage,
)

log = logging.getLogger("crsdebias")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set session.max_turns=5 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--output-dir", help="parent directory for new run directories")
    p.add_argument("--dataset", help="catalog directory (overrides dataset.path)")
    p.add_argument("--policy", choices=("maxent", "single-rl", "dual-rl"), help="policy.kind")
    p.add_argument("--rec-mode", choices=("bpr", "pal", "none"), help="recommender training objective")
    p.add_argument("--no-csm", action="store_true", help="disable the cold-start mapping stage")
    p.add_argument("--max-turns", type=int, help="session.max_turns")
    p.add_argument("--top-k", type=int, help="session.top_k")
    p.add_argument("--parallelism", type=int, help="worker processes for simulation")


def _add_run_arg(p: argparse.ArgumentParser, required: bool = True):
    p.add_argument("--run", type=Path, required=required, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crsdebias", description="Popularity-bias experiments for conversational recommenders.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load or generate, filter, split and annotate a catalog")
    _add_config_args(p)
    _add_run_arg(p, required=False)

    for name, help_ in (("train-rec", "train the recommender"), ("fit-csm", "fit the cold-start mapper"),
                        ("train-policy", "train the conversation policy"), ("simulate", "run the test-suite conversations")):
        p = sub.add_parser(name, help=help_)
        _add_run_arg(p)
        if name == "simulate":
            p.add_argument("--parallelism", type=int, help="worker processes")

    p = sub.add_parser("pipeline", help="run every stage in order")
    _add_config_args(p)
    _add_run_arg(p, required=False)

    p = sub.add_parser("ablate", help="full pipeline, single-stage skips and baseline side by side")
    _add_config_args(p)
    _add_run_arg(p, required=False)
    p.add_argument("--skip", default="PAL,CSM,DPL", help="comma-separated stages to skip one at a time ('' for none)")
    p.add_argument("--format", choices=REPORT_FORMATS, default="markdown", help="comparison table format")

    p = sub.add_parser("report", help="render metrics of a run or ablation directory")
    _add_run_arg(p)
    p.add_argument("--format", choices=REPORT_FORMATS, default="json")
    p.add_argument("--out", type=Path, help="output file (default: inside the run directory)")
    return parser


def load_config(args) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        if not args.config.exists():
            raise ConfigError(f"config file {args.config} not found")
        data = ExperimentConfig.load(args.config).to_dict()
    for assignment in args.overrides:
        apply_override(data, assignment)
    direct = {
        "seed": args.seed, "output_dir": args.output_dir, "dataset.path": args.dataset, "policy.kind": args.policy,
        "rec_mode": args.rec_mode, "session.max_turns": args.max_turns, "session.top_k": args.top_k,
        "parallelism": args.parallelism,
    }
    for key, value in direct.items():
        if value is not None:
            apply_override(data, f"{key}={json.dumps(value)}")
    if args.no_csm:
        apply_override(data, "csm.enabled=false")
    return ExperimentConfig.from_dict(data).validate()


def _target_dir(args, cfg) -> Path:
    return args.run if args.run is not None else new_run_dir(cfg)


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "prepare":
        cfg = load_config(args)
        run_dir = _target_dir(args, cfg)
        stats = prepare(cfg, run_dir)
        f = stats["filtered"]
        print(f"users {f['users']}  items {f['items']}  interactions {f['interactions']}  "
              f"attributes {f['attributes']}  cold {stats['cold_items']}", file=sys.stderr)
        print(f"run directory: {run_dir}", file=sys.stderr)
    elif cmd == "train-rec":
        train_recommender_stage(config_of(args.run), args.run)
    elif cmd == "fit-csm":
        cfg = config_of(args.run)
        if not cfg.csm.enabled:
            raise ConfigError("csm is disabled in this run's config")
        fit_csm_stage(cfg, args.run)
    elif cmd == "train-policy":
        train_policy_stage(config_of(args.run), args.run)
    elif cmd == "simulate":
        cfg = config_of(args.run)
        simulate_stage(cfg, args.run, args.parallelism)
        report = report_stage(cfg, args.run)
        _print_summary(report)
    elif cmd == "pipeline":
        cfg = load_config(args)
        run_dir = run_pipeline(cfg, args.run)
        _print_summary(config_report(run_dir))
        print(f"run directory: {run_dir}", file=sys.stderr)
    elif cmd == "ablate":
        cfg = load_config(args)
        skip = [s.strip() for s in args.skip.split(",") if s.strip()]
        run_dir = run_ablation(cfg, skip, args.run)
        out = emit_report(run_dir, args.format)
        sys.stderr.write(out.read_text() if args.format == "markdown" else f"table written to {out}\n")
        print(f"run directory: {run_dir}", file=sys.stderr)
    elif cmd == "report":
        out = emit_report(args.run, args.format, args.out)
        print(f"report written to {out}", file=sys.stderr)
    return EXIT_OK


def config_report(run_dir):
    from .metrics import MetricsReport
    return MetricsReport.from_dict(json.loads((Path(run_dir) / "metrics.json").read_text()))


def _print_summary(report):
    parts = []
    for name in ("per", "psr", "pcu", "sr", "at", "hsr", "tsr"):
        v = getattr(report, name)
        parts.append(f"{name.upper()} {'n/a' if v is None else f'{v:.4f}'}")
    print("  ".join(parts), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here that is an invalid-input error
        return EXIT_INVALID if exc.code == 2 else (exc.code or EXIT_OK)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except (ConfigError, CatalogError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc} (partial outputs kept)", file=sys.stderr)
        return EXIT_FAILED
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure exit code
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
