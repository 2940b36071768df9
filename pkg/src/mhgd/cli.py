"""``mhgd`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .data import DatasetFormatError
from .experiment import DEFAULT_HEADS, ExperimentError, ablate_heads, run_experiment, thread_limit
from .gradcheck import known_scopes, run_scope
from .report import ReportError, emit_report
from .tensor import ContractError, NumericalError
from .training import METHODS, TrainingAborted

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mhgd")


class UsageError(Exception):
    pass


def _int_list(raw: str) -> List[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list is empty")
    return values


def _common(p: argparse.ArgumentParser, method: bool = False, stage: bool = False) -> None:
    p.add_argument("--config", default="desk",
                   help="config file, or the name of a shipped config (desk, paper_vgg, paper_wrn)")
    p.add_argument("--seed", type=int, action="append",
                   help="run only this seed (repeatable); defaults to the config's seeds")
    p.add_argument("--out-dir", type=Path, help="artifact directory (overrides [run] out_dir)")
    p.add_argument("--parallel-seeds", type=int, default=1, metavar="N",
                   help="run up to N seeds in worker processes (default 1, sequential)")
    if method:
        p.add_argument("--method", choices=METHODS, action="append",
                       help="student method (repeatable); defaults to the config's methods")
    if stage:
        p.add_argument("--stage", choices=("teacher", "mhan", "student", "all"), default="all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mhgd", description="Multi-head graph distillation: training pipeline, checks and reports.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="pretrain the teacher for every seed")
    _common(p)
    p = sub.add_parser("train-mhan", help="fit the multi-head attention network on a trained teacher")
    _common(p)
    p = sub.add_parser("train-student", help="train students with the selected transfer methods")
    _common(p, method=True)
    p = sub.add_parser("run", help="run the whole pipeline (or one --stage) over all seeds")
    _common(p, method=True, stage=True)

    p = sub.add_parser("ablate-heads", help="repeat MHAN and MHGD student training per head count")
    _common(p)
    p.add_argument("--heads", type=_int_list, default=list(DEFAULT_HEADS),
                   help="comma-separated head counts (default 1,2,4,8)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks at 64-bit")
    p.add_argument("scope", nargs="?", default="all",
                   help="all, ops, svd, pipeline or a single op name")
    p.add_argument("--trials", type=int, default=20, help="random instances per target")

    p = sub.add_parser("report", help="tables and an accuracy chart for a run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out-dir", type=Path, help="where to write the report (default: run_dir)")
    p.add_argument("--force", action="store_true", help="mix runs from different configs")
    return parser


def _load(args):
    overrides = {"run": {"out_dir": str(args.out_dir)}} if getattr(args, "out_dir", None) else None
    return load_config(args.config, overrides), overrides


def _print_rows(rows, keys) -> None:
    for r in rows:
        print("  ".join(f"{k}={r[k]:.2f}" if isinstance(r[k], float) else f"{k}={r[k]}" for k in keys))


def cmd_pipeline(args, stage: str) -> int:
    cfg, overrides = _load(args)
    methods = args.method if getattr(args, "method", None) else None
    if args.parallel_seeds < 1:
        raise UsageError("--parallel-seeds must be at least 1")
    t0 = time.perf_counter()
    rows = run_experiment(cfg, stage, methods, args.seed, cfg.out_dir, args.parallel_seeds,
                          config_path=args.config, overrides=overrides)
    print(f"{stage} stage finished in {time.perf_counter() - t0:.1f}s; artifacts in {cfg.out_dir} "
          f"(config {cfg.hash})")
    _print_rows(rows, ("method", "runs", "test_accuracy_mean", "test_accuracy_std"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, _ = _load(args)
    rows = ablate_heads(cfg, args.heads, args.seed, cfg.out_dir)
    print(f"ablation table written to {cfg.out_dir / 'ablation_heads.txt'}")
    _print_rows(rows, ("heads", "runs", "test_accuracy_mean", "test_accuracy_std"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.scope not in known_scopes():
        raise UsageError(f"unknown gradcheck scope {args.scope!r}; choose from {', '.join(known_scopes())}")
    results = run_scope(args.scope, args.trials)
    for r in results:
        print(r.line())
    failed = [r.target for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} targets within threshold")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_report(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = emit_report(args.run_dir, args.out_dir, args.force)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    target = args.out_dir or args.run_dir
    print(f"report written to {target / 'report.txt'}, {target / 'report.csv'} and "
          f"{target / 'report_accuracy.svg'}")
    _print_rows(rows, ("method", "runs", "test_accuracy_mean", "test_accuracy_std"))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", datefmt="%H:%M:%S")
    handlers = {
        "train-teacher": lambda a: cmd_pipeline(a, "teacher"),
        "train-mhan": lambda a: cmd_pipeline(a, "mhan"),
        "train-student": lambda a: cmd_pipeline(a, "student"),
        "run": lambda a: cmd_pipeline(a, a.stage),
        "ablate-heads": cmd_ablate,
        "gradcheck": cmd_gradcheck,
        "report": cmd_report,
    }
    try:
        with thread_limit(None):
            return handlers[args.command](args)
    except (ConfigError, UsageError, ExperimentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TrainingAborted, CheckpointError, DatasetFormatError, ContractError, NumericalError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
