"""Multi-seed orchestration of the teacher, MHAN and student stages.

Artifacts for seed ``s`` live under ``<out_dir>/seed_<s>/`` in one directory
per stage (``teacher``, ``mhan``, ``student_<method>``), each holding a
checkpoint, ``metrics.csv`` and ``meta.txt``. A stage whose checkpoint
already covers its epoch budget is loaded instead of retrained, and a
partial one is resumed.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .attention import MhgdStack
from .checkpoint import checkpoint_load
from .config import ExperimentConfig, load_config
from .data import LabeledImageSet, generate_synthetic, load_cifar_binary
from .networks import Network, build_network
from .training import (
    RunMetrics,
    TrainingAborted,
    TransferSettings,
    load_network_state,
    params_bytes,
    stack_from_checkpoint,
    train_mhan,
    train_student,
    train_teacher,
)

log = logging.getLogger(__name__)

STAGES = ("teacher", "mhan", "student", "all")
DEFAULT_HEADS = (1, 2, 4, 8)
SUMMARY_HEADER = ["method", "runs", "test_accuracy_mean", "test_accuracy_std",
                  "train_accuracy_mean", "loss_transfer_final_mean", "config_hash"]


class ExperimentError(RuntimeError):
    """Artifacts on disk conflict with the requested run."""


# -- data ----------------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> Tuple[LabeledImageSet, LabeledImageSet]:
    ds = cfg.dataset
    if ds.source == "synthetic":
        train = generate_synthetic(ds.classes, ds.train_count, ds.size, [ds.seed, 0], ds.difficulty, "train")
        test = generate_synthetic(ds.classes, ds.test_count, ds.size, [ds.seed, 1], ds.difficulty, "test")
        return train, test
    train = load_cifar_binary(ds.train_path, ds.variant, ds.size, ds.classes, "train")
    test = load_cifar_binary(ds.test_path, ds.variant, ds.size, ds.classes, "test")
    return train, test


# -- layout ----------------------------------------------------------------------------

@dataclass(frozen=True)
class SeedLayout:
    root: Path
    seed: int

    @property
    def base(self) -> Path:
        return self.root / f"seed_{self.seed}"

    @property
    def teacher(self) -> Path:
        return self.base / "teacher"

    @property
    def mhan(self) -> Path:
        return self.base / "mhan"

    def student(self, method: str) -> Path:
        return self.base / f"student_{method}"


def _ckpt(directory: Path) -> Path:
    return directory / f"{directory.name.split('_')[0]}.ckpt"


def _prior(directory: Path, cfg_hash: str):
    """Checkpoint and metrics to resume from, or ``(None, None)`` for a fresh stage."""
    path = _ckpt(directory)
    if not path.exists():
        return None, None
    ckpt = checkpoint_load(path)
    prior = RunMetrics.read(directory) if (directory / "metrics.csv").exists() else RunMetrics()
    found = prior.meta.get("config_hash")
    if found is not None and found != cfg_hash:
        raise ExperimentError(f"{directory} was produced by config {found}, not {cfg_hash}; "
                              f"choose another --out-dir")
    prior.records = [r for r in prior.records if r["epoch"] <= ckpt.epoch]
    return ckpt, prior


def _init_seed(seed: int, role: int) -> List[int]:
    return [seed, role]


# -- stages ------------------------------------------------------------------------------

class SeedRunner:
    """Runs the stages of one seed, reusing finished artifacts on disk."""

    def __init__(self, cfg: ExperimentConfig, seed: int, out_dir: Optional[Path] = None,
                 data: Optional[Tuple[LabeledImageSet, LabeledImageSet]] = None):
        self.cfg = cfg
        self.seed = seed
        self.layout = SeedLayout(Path(out_dir or cfg.out_dir), seed)
        self._data = data
        self._teacher: Optional[Network] = None

    @property
    def data(self):
        if self._data is None:
            self._data = load_datasets(self.cfg)
        return self._data

    def _meta(self, **extra) -> Dict[str, str]:
        return {"config_hash": self.cfg.hash, **{k: str(v) for k, v in extra.items()}}

    def teacher(self) -> Network:
        if self._teacher is not None:
            return self._teacher
        directory = self.layout.teacher
        ckpt, prior = _prior(directory, self.cfg.hash)
        net = build_network(self.cfg.teacher, _init_seed(self.seed, 0))
        hyper = self.cfg.stages["teacher"]
        if ckpt is not None and ckpt.epoch >= hyper.epochs:
            load_network_state(net, ckpt)
        else:
            directory.mkdir(parents=True, exist_ok=True)
            train, test = self.data
            log.info("seed %d: training teacher", self.seed)
            train_teacher(net, train, test, hyper, self.seed, resume=ckpt,
                          checkpoint_path=_ckpt(directory), meta=self._meta(), prior=prior,
                          metrics_dir=directory)
        self._teacher = net.freeze()
        return self._teacher

    def mhan(self, heads: Optional[int] = None, directory: Optional[Path] = None) -> MhgdStack:
        m = self.cfg.mhgd
        heads = heads or m.heads
        directory = directory or self.layout.mhan
        teacher = self.teacher()
        ckpt, prior = _prior(directory, self.cfg.hash)
        hyper = self.cfg.stages["mhan"]
        if ckpt is not None and ckpt.epoch >= hyper.epochs:
            return stack_from_checkpoint(ckpt)
        if ckpt is not None:
            stack = stack_from_checkpoint(ckpt)
        else:
            stack = MhgdStack.init(teacher.tap_dims, heads, m.d_att, m.d1, _init_seed(self.seed, 2))
        directory.mkdir(parents=True, exist_ok=True)
        train, _ = self.data
        log.info("seed %d: training MHAN with %d heads", self.seed, heads)
        before = params_bytes(teacher.params)
        train_mhan(teacher, stack, train, hyper, self.seed, m.k, m.d_att, m.d1, resume=ckpt,
                   checkpoint_path=_ckpt(directory), meta=self._meta(heads=heads), prior=prior,
                   metrics_dir=directory)
        _require_unchanged(before, teacher.params, "teacher")
        return stack

    def student(self, method: str, stack: Optional[MhgdStack] = None,
                directory: Optional[Path] = None, heads: Optional[int] = None) -> RunMetrics:
        m = self.cfg.mhgd
        directory = directory or self.layout.student(method)
        ckpt, prior = _prior(directory, self.cfg.hash)
        hyper = self.cfg.stages["student"]
        if ckpt is not None and ckpt.epoch >= hyper.epochs:
            return prior
        teacher = self.teacher() if method != "student" else None
        if method == "mhgd" and stack is None:
            stack = self.mhan()
        net = build_network(self.cfg.student, _init_seed(self.seed, 1))
        directory.mkdir(parents=True, exist_ok=True)
        train, test = self.data
        log.info("seed %d: training student (%s)", self.seed, method)
        snapshots = []
        if teacher is not None:
            snapshots.append(("teacher", params_bytes(teacher.params), teacher.params))
        if stack is not None and method == "mhgd":
            named = stack.named_parameters()
            snapshots.append(("MHAN", params_bytes(named), named))
        extra = {"heads": heads or m.heads} if method == "mhgd" else {}
        _, _, metrics = train_student(
            net, train, test, hyper, self.seed,
            TransferSettings(method, m.weight, m.k, m.temperature), teacher,
            stack if method == "mhgd" else None, resume=ckpt, checkpoint_path=_ckpt(directory),
            meta=self._meta(**extra), prior=prior, metrics_dir=directory)
        for name, before, params in snapshots:
            _require_unchanged(before, params, name)
        return metrics


def _require_unchanged(before: Dict[str, bytes], params, what: str) -> None:
    if params_bytes(params) != before:
        raise TrainingAborted(f"{what} parameters changed during training")


def _run_seed(cfg: ExperimentConfig, seed: int, stage: str, methods: Sequence[str],
              out_dir: Path) -> None:
    runner = SeedRunner(cfg, seed, out_dir)
    if stage in ("teacher", "all"):
        runner.teacher()
    if stage in ("mhan", "all"):
        runner.mhan()
    if stage in ("student", "all"):
        for method in methods:
            runner.student(method)


def _worker(args) -> None:
    path, overrides, seed, stage, methods, out_dir, threads = args
    with thread_limit(threads):
        _run_seed(load_config(path, overrides), seed, stage, methods, Path(out_dir))


@contextmanager
def thread_limit(threads: Optional[int]):
    """Cap BLAS/OpenMP pools; ``None`` reads ``MHGD_THREADS`` and leaves pools alone if unset."""
    if threads is None:
        raw = os.environ.get("MHGD_THREADS", "").strip()
        threads = int(raw) if raw else None
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=threads):
        yield


def run_experiment(cfg: ExperimentConfig, stage: str = "all", methods: Optional[Sequence[str]] = None,
                   seeds: Optional[Sequence[int]] = None, out_dir=None, parallel_seeds: int = 1,
                   config_path=None, overrides=None) -> List[dict]:
    """Run ``stage`` for every seed, then rewrite the summary table.

    ``parallel_seeds > 1`` runs seeds in worker processes, which reload the
    config from ``config_path``.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    methods = list(methods or cfg.methods)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    out_dir = Path(out_dir or cfg.out_dir)
    prepare_out_dir(cfg, out_dir)
    if parallel_seeds > 1 and len(seeds) > 1:
        if config_path is None:
            raise ValueError("parallel seeds need the config path")
        jobs = [(str(config_path), overrides, s, stage, methods, str(out_dir), 1) for s in seeds]
        with ProcessPoolExecutor(max_workers=parallel_seeds) as pool:
            list(pool.map(_worker, jobs))
    else:
        for seed in seeds:
            _run_seed(cfg, seed, stage, methods, out_dir)
    rows = summarize(out_dir, cfg, methods)
    if rows:
        write_table(out_dir / "summary", rows, SUMMARY_HEADER,
                    title=f"Final accuracy over seeds (config {cfg.hash})")
    return rows


def prepare_out_dir(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    stamp = out_dir / "config.ini"
    text = f"# config_hash = {cfg.hash}\n" + cfg.canonical_text()
    if stamp.exists() and stamp.read_text() != text:
        first = stamp.read_text().splitlines()[0]
        raise ExperimentError(f"{out_dir} holds a run of another config ({first.lstrip('# ')}); "
                              f"choose another --out-dir")
    stamp.write_text(text)


# -- summaries ---------------------------------------------------------------------------

def _final(metrics: RunMetrics, column: str, split: str) -> float:
    values = metrics.column(column, split)
    return values[-1] if values else math.nan


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate(label: str, runs: Sequence[RunMetrics], cfg_hash: str) -> dict:
    test_mean, test_std = mean_std([_final(r, "accuracy", "test") for r in runs])
    train_mean, _ = mean_std([_final(r, "accuracy", "train") for r in runs])
    transfer, _ = mean_std([_final(r, "loss_transfer", "train") for r in runs])
    return {"method": label, "runs": len(runs), "test_accuracy_mean": test_mean,
            "test_accuracy_std": test_std, "train_accuracy_mean": train_mean,
            "loss_transfer_final_mean": transfer, "config_hash": cfg_hash}


def summarize(out_dir: Path, cfg: ExperimentConfig, methods: Iterable[str]) -> List[dict]:
    rows = []
    for method in methods:
        runs = []
        for seed in cfg.seeds:
            directory = SeedLayout(out_dir, seed).student(method)
            ckpt = _ckpt(directory)
            if ckpt.exists() and (directory / "metrics.csv").exists():
                runs.append(RunMetrics.read(directory))
        if runs:
            rows.append(aggregate(method, runs, cfg.hash))
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.4f}"
    return str(value)


def format_table(rows: Sequence[dict], header: Sequence[str]) -> str:
    cells = [list(header)] + [[_fmt(r[h]) for h in header] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_table(stem: Path, rows: Sequence[dict], header: Sequence[str], title: str = "",
                footer: str = "") -> None:
    import csv
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([repr(r[h]) if isinstance(r[h], float) else r[h] for h in header])
    text = (title + "\n\n" if title else "") + format_table(rows, header)
    if footer:
        text += "\n" + footer
    stem.with_suffix(".txt").write_text(text)


# -- head-count ablation -----------------------------------------------------------------

# Published full-scale accuracy (VGG on CIFAR100) by head count; 0 is the student alone.
REFERENCE_HEADS = {0: 59.97, 1: 65.71, 2: 66.41, 4: 67.01, 8: 67.02, 16: 66.70}


def heads_reference_note() -> str:
    cells = ", ".join(f"A={a}: {v:.2f}" for a, v in REFERENCE_HEADS.items())
    return ("Published full-scale reference, VGG on CIFAR100 (A=0 is the student alone):\n"
            f"  {cells}\n"
            "Desk-scale runs use tiny networks and synthetic data, so only the table\n"
            "structure is comparable; no trend is asserted.\n")


ABLATION_HEADER = ["heads", "runs", "test_accuracy_mean", "test_accuracy_std",
                   "loss_transfer_final_mean", "config_hash"]


def ablate_heads(cfg: ExperimentConfig, heads: Sequence[int] = DEFAULT_HEADS,
                 seeds: Optional[Sequence[int]] = None, out_dir=None) -> List[dict]:
    """MHAN plus MHGD student for every head count; teachers are shared across counts."""
    heads = list(heads)
    if not heads or min(heads) < 1:
        raise ValueError("head list must be non-empty and positive")
    seeds = list(seeds if seeds is not None else cfg.seeds)
    out_dir = Path(out_dir or cfg.out_dir)
    prepare_out_dir(cfg, out_dir)
    data = load_datasets(cfg)
    runs: Dict[int, List[RunMetrics]] = {a: [] for a in heads}
    for seed in seeds:
        runner = SeedRunner(cfg, seed, out_dir, data)
        for a in heads:
            base = out_dir / f"heads_{a}" / f"seed_{seed}"
            stack = runner.mhan(a, base / "mhan")
            runs[a].append(runner.student("mhgd", stack, base / "student_mhgd", heads=a))
    rows = []
    for a in heads:
        row = aggregate(f"A={a}", runs[a], cfg.hash)
        rows.append({"heads": a, "runs": row["runs"], "test_accuracy_mean": row["test_accuracy_mean"],
                     "test_accuracy_std": row["test_accuracy_std"],
                     "loss_transfer_final_mean": row["loss_transfer_final_mean"],
                     "config_hash": cfg.hash})
    write_table(out_dir / "ablation_heads", rows, ABLATION_HEADER,
                title=f"Test accuracy against the number of attention heads (config {cfg.hash})",
                footer=heads_reference_note())
    return rows
