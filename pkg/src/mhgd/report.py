"""Comparison tables and accuracy curves for a finished run directory."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .experiment import aggregate, write_table
from .training import CSV_HEADER, RunMetrics, read_meta

log = logging.getLogger(__name__)

REPORT_HEADER = ["method", "runs", "test_accuracy_mean", "test_accuracy_std",
                 "train_accuracy_mean", "loss_transfer_final_mean", "config_hash"]


# Published full-scale CIFAR100 top-1 accuracy: method -> (VGG, WResNet).
REFERENCE_CIFAR100 = {"student": (59.97, 71.62), "soft-logits": (60.95, 71.88),
                      "kd-svdf": (64.38, 71.82), "mhgd": (67.02, 72.79)}


def reference_note() -> str:
    lines = ["Published full-scale reference on CIFAR100 (VGG / WResNet), for context only:"]
    for method, (vgg, wrn) in REFERENCE_CIFAR100.items():
        lines.append(f"  {method:<12} {vgg:6.2f} / {wrn:6.2f}")
    lines.append("Desk-scale numbers come from small networks on small data and are not")
    lines.append("expected to match these values or their gaps.")
    return "\n".join(lines) + "\n"


class ReportError(RuntimeError):
    def __init__(self, message: str, exit_code: int = 1):
        self.exit_code = exit_code
        super().__init__(message)


class MalformedMetrics(ValueError):
    pass


def read_metrics_strict(directory: Path) -> RunMetrics:
    """Like :meth:`RunMetrics.read` but rejects bad headers, cells and non-finite losses."""
    out = RunMetrics(meta=read_meta(directory / "meta.txt"))
    with open(directory / "metrics.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise MalformedMetrics(f"unexpected header {header}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(CSV_HEADER):
                raise MalformedMetrics(f"line {lineno}: {len(row)} fields, expected {len(CSV_HEADER)}")
            try:
                record = {"epoch": int(row[0]), "split": row[1],
                          **{k: float(v) for k, v in zip(CSV_HEADER[2:], row[2:])}}
            except ValueError as exc:
                raise MalformedMetrics(f"line {lineno}: {exc}") from None
            if record["split"] not in ("train", "test"):
                raise MalformedMetrics(f"line {lineno}: unknown split {record['split']!r}")
            if not all(math.isfinite(record[k]) for k in CSV_HEADER[2:]):
                raise MalformedMetrics(f"line {lineno}: non-finite value")
            out.records.append(record)
    if not out.records:
        raise MalformedMetrics("no records")
    return out


def _label(metrics: RunMetrics, directory: Path, root: Path) -> str:
    method = metrics.meta.get("method") or directory.name
    parts = directory.relative_to(root).parts
    group = next((p for p in parts if p.startswith("heads_")), None)
    if group is not None:
        method = f"{method}[A={group.split('_', 1)[1]}]"
    return method


def collect(run_dir: Path) -> Tuple[Dict[str, List[RunMetrics]], List[str]]:
    """Group every readable metrics file under ``run_dir`` by method label.

    Runs without a test split (MHAN fitting) are left out. Returns the groups
    and the list of skipped files.
    """
    groups: Dict[str, List[RunMetrics]] = defaultdict(list)
    skipped = []
    for path in sorted(run_dir.rglob("metrics.csv")):
        try:
            metrics = read_metrics_strict(path.parent)
        except (MalformedMetrics, OSError, UnicodeDecodeError) as exc:
            warnings.warn(f"skipping {path}: {exc}", stacklevel=2)
            skipped.append(str(path))
            continue
        if not metrics.column("accuracy", "test"):
            continue
        groups[_label(metrics, path.parent, run_dir)].append(metrics)
    return dict(groups), skipped


def mean_curve(runs: List[RunMetrics], split: str = "test") -> Tuple[np.ndarray, np.ndarray]:
    """Epoch-wise mean accuracy over the runs that reached each epoch."""
    per_epoch: Dict[int, List[float]] = defaultdict(list)
    for run in runs:
        for r in run.records:
            if r["split"] == split:
                per_epoch[r["epoch"]].append(r["accuracy"])
    epochs = np.array(sorted(per_epoch), dtype=np.int64)
    return epochs, np.array([np.mean(per_epoch[e]) for e in epochs])


def plot_curves(groups: Dict[str, List[RunMetrics]], path: Path, title: str = "") -> float:
    """Test accuracy against epoch, one line per method; returns the x-axis maximum."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    max_epoch = 0
    for label in sorted(groups):
        epochs, acc = mean_curve(groups[label])
        if epochs.size == 0:
            continue
        max_epoch = max(max_epoch, int(epochs[-1]))
        ax.plot(epochs, acc, marker="o", markersize=2.5, linewidth=1.2, label=label)
    ax.set_xlim(0, max(max_epoch, 1))
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy (%)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return float(max(max_epoch, 1))


def emit_report(run_dir, out_dir=None, force: bool = False) -> List[dict]:
    """Write ``report.txt``, ``report.csv`` and ``report_accuracy.svg``.

    Raises :class:`ReportError` when nothing usable is found (exit code 1) or
    when runs from different configs are mixed without ``force`` (exit code 2).
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"{run_dir} is not a directory")
    groups, skipped = collect(run_dir)
    if not groups:
        raise ReportError(f"no usable metrics under {run_dir}")
    hashes = sorted({r.meta.get("config_hash", "unknown") for runs in groups.values() for r in runs})
    if len(hashes) > 1 and not force:
        raise ReportError(f"runs come from different configs ({', '.join(hashes)}); "
                          f"pass --force to mix them", exit_code=2)
    rows = []
    for label in sorted(groups):
        runs = groups[label]
        run_hashes = sorted({r.meta.get("config_hash", "unknown") for r in runs})
        rows.append(aggregate(label, runs, "+".join(run_hashes)))
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    title = f"Final accuracy per method under {run_dir}"
    if skipped:
        title += f" ({len(skipped)} malformed file(s) skipped)"
    write_table(out_dir / "report", rows, REPORT_HEADER, title=title, footer=reference_note())
    plot_curves(groups, out_dir / "report_accuracy.svg", title="Test accuracy")
    log.info("report written to %s", out_dir)
    return rows
