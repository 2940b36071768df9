"""Teacher pretraining, MHAN fitting and multi-task student training."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .attention import SMOOTHED, MhgdStack, mhan_loss, mhgd_graphs, transfer_loss
from .checkpoint import Checkpoint, checkpoint_save, make_checkpoint, rng_from_words
from .data import AugmentConfig, LabeledImageSet, Prefetcher, augment_batch, iterate_batches
from .networks import (
    Network,
    check_tap_pairing,
    feature_l2_loss,
    soft_logits_loss,
)
from .optim import LrSchedule, OptimizerState, lr_at_epoch, sgd_nesterov_step
from .svd import DegenerateRankError, compress_feature_map, sign_align_pair
from .tensor import ContractError, Tensor, backprop, no_grad

log = logging.getLogger(__name__)

METHODS = ("student", "soft-logits", "kd-svdf", "mhgd")
CSV_HEADER = ["epoch", "split", "loss_target", "loss_transfer", "accuracy", "lr", "seconds"]
MAX_SKIP_FRACTION = 0.10


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainHyper:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.01
    milestones: Tuple[Tuple[int, float], ...] = ()
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    prefetch: bool = True

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, tuple(self.milestones))


@dataclass
class TransferSettings:
    method: str = "mhgd"
    weight: float = 1.0          # lambda on the transfer term
    k: int = 1                   # singular vectors per sensed map
    temperature: float = 4.0     # soft-logits only

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")


@dataclass
class RunMetrics:
    records: List[dict] = field(default_factory=list)
    meta: Dict[str, str] = field(default_factory=dict)

    def add(self, epoch, split, loss_target, loss_transfer, accuracy, lr, seconds):
        for name, value in (("loss_target", loss_target), ("loss_transfer", loss_transfer)):
            if not math.isfinite(value):
                raise TrainingAborted(f"epoch {epoch}: non-finite {name} on {split} split")
        self.records.append(dict(epoch=int(epoch), split=split, loss_target=float(loss_target),
                                 loss_transfer=float(loss_transfer), accuracy=float(accuracy),
                                 lr=float(lr), seconds=float(seconds)))

    def column(self, name: str, split: str = "train") -> List[float]:
        return [r[name] for r in self.records if r["split"] == split]

    def write(self, directory, append: bool = False) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "metrics.csv"
        fresh = not (append and path.exists())
        with open(path, "w" if fresh else "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(CSV_HEADER)
            for r in self.records:
                writer.writerow([r["epoch"], r["split"]] +
                                [repr(r[k]) for k in CSV_HEADER[2:]])
        with open(directory / "meta.txt", "w") as fh:
            for key in sorted(self.meta):
                fh.write(f"{key}: {self.meta[key]}\n")

    @classmethod
    def read(cls, directory) -> "RunMetrics":
        directory = Path(directory)
        out = cls(meta=read_meta(directory / "meta.txt"))
        with open(directory / "metrics.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                out.records.append({"epoch": int(row["epoch"]), "split": row["split"],
                                    **{k: float(row[k]) for k in CSV_HEADER[2:]}})
        return out


def _start_metrics(prior: Optional[RunMetrics], meta: Optional[Dict[str, str]]) -> RunMetrics:
    if prior is None:
        return RunMetrics(meta=dict(meta or {}))
    return RunMetrics([dict(r) for r in prior.records], {**prior.meta, **(meta or {})})


def read_meta(path) -> Dict[str, str]:
    meta = {}
    path = Path(path)
    if path.exists():
        for line in path.read_text().splitlines():
            if ":" in line:
                key, value = line.split(":", 1)
                meta[key.strip()] = value.strip()
    return meta


# -- evaluation --------------------------------------------------------------------

def evaluate(net: Network, data: LabeledImageSet, batch_size: int = 256,
             with_loss: bool = False):
    """Top-1 accuracy in percent, classifier path only, running BN statistics."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty split")
    correct, loss_sum = 0, 0.0
    with no_grad():
        for images, labels in iterate_batches(data, batch_size, drop_last=False):
            x = augment_batch(images, AugmentConfig(), None, train=False)
            logits, _ = net.forward(x, train=False)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            if with_loss:
                loss_sum += float(ops.cross_entropy(logits, labels).data) * len(labels)
    acc = 100.0 * correct / len(data)
    return (acc, loss_sum / len(data)) if with_loss else acc


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ContractError("cannot evaluate on an empty split")
    return 100.0 * float((np.asarray(logits).argmax(axis=1) == labels).mean())


# -- helpers ------------------------------------------------------------------------

def _batches(data, hyper: TrainHyper, rng):
    for images, labels in iterate_batches(data, hyper.batch_size, rng):
        yield augment_batch(images, hyper.augment, rng, train=True), labels


def _batch_stream(data, hyper, rng):
    source = _batches(data, hyper, rng)
    return Prefetcher(source) if hyper.prefetch else source


def _step(params: Dict[str, Tensor], loss: Tensor, opt: OptimizerState) -> None:
    leaves = list(params.values())
    grads = backprop(loss, leaves)
    sgd_nesterov_step(params, dict(zip(params, grads)), opt)


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite {what} at epoch {epoch + 1}, step {step}")


def network_checkpoint(net: Network, opt: Optional[OptimizerState], epoch: int,
                       rng: Optional[np.random.Generator]) -> Checkpoint:
    return make_checkpoint({k: v.data for k, v in net.params.items()}, net.buffers,
                           opt.velocity if opt else None, epoch, rng)


def load_network_state(net: Network, ckpt: Checkpoint) -> None:
    params, buffers = ckpt.section("param/"), ckpt.section("buffer/")
    missing = set(net.params) - set(params)
    if missing:
        raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    for k, p in net.params.items():
        if params[k].shape != p.shape:
            raise ContractError(f"{k}: checkpoint shape {params[k].shape} vs network {p.shape}")
        p.data = params[k].copy()
    for k in net.buffers:
        net.buffers[k] = buffers[k].copy()


def stack_checkpoint(stack: MhgdStack, opt: Optional[OptimizerState], epoch: int,
                     rng: Optional[np.random.Generator], d_att: int, d1: int) -> Checkpoint:
    layout = [stack.num_pairs, stack.num_heads, d_att, d1] + [d for pair in stack.dims for d in pair]
    return make_checkpoint({k: v.data for k, v in stack.named_parameters().items()}, None,
                           opt.velocity if opt else None, epoch, rng, {"stack": layout})


def stack_from_checkpoint(ckpt: Checkpoint) -> MhgdStack:
    layout = [int(x) for x in ckpt.arrays["meta/stack"]]
    m, heads, d_att, d1 = layout[:4]
    dims = [tuple(layout[4 + 2 * i:6 + 2 * i]) for i in range(m)]
    stack = MhgdStack.init(dims, heads, d_att, d1, seed=0)
    params = ckpt.section("param/")
    for k, p in stack.named_parameters().items():
        p.data = params[k].copy()
    return stack


def _resume(ckpt: Optional[Checkpoint], opt: OptimizerState, rng):
    if ckpt is None:
        return 0, rng
    opt.velocity = {k: v.copy() for k, v in ckpt.section("opt/velocity/").items()}
    if "rng/pcg64" in ckpt.arrays:
        rng = rng_from_words(ckpt.arrays["rng/pcg64"])
    return ckpt.epoch, rng


def copy_network(net: Network) -> Network:
    clone = copy.deepcopy(net)
    for p in clone.params.values():
        p.requires_grad = not net.frozen
    return clone


def params_bytes(params: Dict[str, Tensor]) -> Dict[str, bytes]:
    return {k: v.data.tobytes() for k, v in params.items()}


# -- classifier training (teacher and student) ----------------------------------------

def fit_classifier(net: Network, train: LabeledImageSet, test: LabeledImageSet, hyper: TrainHyper,
                   seed: int, transfer: Optional[TransferSettings] = None,
                   teacher: Optional[Network] = None, stack: Optional[MhgdStack] = None,
                   resume: Optional[Checkpoint] = None, checkpoint_path=None,
                   meta: Optional[Dict[str, str]] = None, stream: int = 3,
                   prior: Optional[RunMetrics] = None, metrics_dir=None):
    """Cross-entropy training, optionally with a weighted transfer term.

    ``stream`` selects the shuffling/augmentation random stream; all student
    methods share one so that they see identical batches. When resuming,
    ``prior`` carries the metrics of the epochs already done. With
    ``metrics_dir`` set, metrics are rewritten there after every epoch,
    before the checkpoint, so an interrupted run loses nothing it resumes.

    Returns ``(net, optimizer_state, metrics)``.
    """
    method = transfer.method if transfer else "student"
    if method != "student":
        if teacher is None:
            raise ContractError(f"method {method} needs a teacher")
        check_tap_pairing(teacher.taps, net.taps)
        if method == "mhgd":
            if stack is None:
                raise ContractError("method mhgd needs a trained MHAN stack")
            if [tuple(d) for d in stack.dims] != net.tap_dims:
                raise ContractError(f"MHAN pair dims {stack.dims} do not match taps {net.tap_dims}")
            for p in stack.named_parameters().values():
                p.requires_grad = False
    rng = np.random.default_rng([seed, stream])
    opt = OptimizerState(lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    if resume is not None:
        load_network_state(net, resume)
    start, rng = _resume(resume, opt, rng)
    metrics = _start_metrics(prior, meta)
    weight = transfer.weight if transfer else 0.0
    sched = hyper.schedule
    params = net.params
    bound = None

    for epoch in range(start, hyper.epochs):
        opt.lr = lr_at_epoch(sched, epoch)
        t0 = time.perf_counter()
        ce_sum = tr_sum = 0.0
        steps = skipped = 0
        for step, (x, labels) in enumerate(_batch_stream(train, hyper, rng)):
            logits, s_pairs = net.forward(x, train=True)
            ce = ops.cross_entropy(logits, labels)
            loss, tr_value = ce, 0.0
            if method != "student":
                try:
                    term, graphs = _transfer_term(transfer, teacher, stack, x, logits, s_pairs)
                except DegenerateRankError as exc:
                    skipped += 1
                    log.warning("epoch %d step %d skipped: %s", epoch + 1, step, exc)
                    continue
                tr_value = float(term.data)
                if graphs is not None and step == 0:
                    bound = _smoothed_bound_check(graphs, epoch)
                if "initial_loss_transfer" not in metrics.meta and resume is None:
                    metrics.meta["initial_loss_transfer"] = repr(tr_value)
                loss = ops.add(ce, ops.scale(term, weight)) if weight else ce
            _check_finite(float(loss.data), "loss", epoch, step)
            _step(params, loss, opt)
            ce_sum += float(ce.data)
            tr_sum += tr_value
            steps += 1
        if skipped and skipped > MAX_SKIP_FRACTION * (steps + skipped):
            raise TrainingAborted(f"epoch {epoch + 1}: skipped {skipped} of {steps + skipped} batches")
        if steps == 0:
            raise TrainingAborted(f"epoch {epoch + 1}: no usable batches")
        train_acc = evaluate(net, train)
        test_acc, test_ce = evaluate(net, test, with_loss=True)
        secs = time.perf_counter() - t0
        metrics.add(epoch + 1, "train", ce_sum / steps, tr_sum / steps, train_acc, opt.lr, secs)
        metrics.add(epoch + 1, "test", test_ce, 0.0, test_acc, opt.lr, secs)
        if bound is not None:
            metrics.meta["max_graph_entry_margin"] = repr(bound)
        log.info("%s epoch %d: ce %.4f transfer %.4f train %.1f%% test %.1f%%", method, epoch + 1,
                 ce_sum / steps, tr_sum / steps, train_acc, test_acc)
        if metrics_dir is not None:
            metrics.write(metrics_dir)
        if checkpoint_path is not None:
            checkpoint_save(network_checkpoint(net, opt, epoch + 1, rng), checkpoint_path)
    if metrics_dir is not None:
        metrics.write(metrics_dir)
    if checkpoint_path is not None and start >= hyper.epochs:
        checkpoint_save(network_checkpoint(net, opt, start, rng), checkpoint_path)
    return net, opt, metrics


def _smoothed_bound_check(graphs, epoch: int) -> float:
    """Largest ``entry - e^2/(e^2 + N - 1)`` over the given smoothed graphs."""
    worst = -np.inf
    for g in graphs:
        vals = g.values
        n = vals.shape[-1]
        limit = math.e ** 2 / (math.e ** 2 + n - 1)
        worst = max(worst, float(vals.max()) - limit)
    if worst > 1e-6:
        raise TrainingAborted(f"epoch {epoch + 1}: smoothed graph entry exceeds bound by {worst:.3g}")
    return worst


def compress_pairs(pairs, k: int):
    return [(compress_feature_map(f, k, "front"), compress_feature_map(b, k, "back")) for f, b in pairs]


def _transfer_term(cfg: TransferSettings, teacher: Network, stack: Optional[MhgdStack],
                   x: Tensor, logits: Tensor, s_pairs):
    t_logits, t_pairs = teacher.forward(x, train=False)
    if cfg.method == "soft-logits":
        return soft_logits_loss(t_logits, logits, cfg.temperature), None
    with no_grad():
        t_sets = compress_pairs(t_pairs, cfg.k)
    s_sets = compress_pairs(s_pairs, cfg.k)
    s_sets = [(sign_align_pair(sf, tf), sign_align_pair(sb, tb))
              for (sf, sb), (tf, tb) in zip(s_sets, t_sets)]
    if cfg.method == "kd-svdf":
        flat_t = [v for pair in t_sets for v in pair]
        flat_s = [v for pair in s_sets for v in pair]
        return feature_l2_loss(flat_t, flat_s), None
    with no_grad():
        g_t = mhgd_graphs(stack, t_sets, SMOOTHED)
    g_s = mhgd_graphs(stack, s_sets, SMOOTHED)
    return transfer_loss(g_t, g_s), g_t + g_s


def train_teacher(net: Network, train: LabeledImageSet, test: LabeledImageSet, hyper: TrainHyper,
                  seed: int, resume: Optional[Checkpoint] = None, checkpoint_path=None,
                  meta: Optional[Dict[str, str]] = None, **kwargs):
    meta = {"method": "teacher", "stage": "teacher", "seed": str(seed), **(meta or {})}
    return fit_classifier(net, train, test, hyper, seed, resume=resume,
                          checkpoint_path=checkpoint_path, meta=meta, stream=1, **kwargs)


def train_student(net: Network, train: LabeledImageSet, test: LabeledImageSet, hyper: TrainHyper,
                  seed: int, transfer: TransferSettings, teacher: Optional[Network] = None,
                  stack: Optional[MhgdStack] = None, resume: Optional[Checkpoint] = None,
                  checkpoint_path=None, meta: Optional[Dict[str, str]] = None, **kwargs):
    """Multi-task training: cross-entropy plus ``weight`` times the method's transfer loss.

    ``method="student"`` trains on cross-entropy alone. Teacher and MHAN
    parameters are read but never written.
    """
    meta = {"method": transfer.method, "stage": "student", "seed": str(seed), **(meta or {})}
    if transfer.method == "student":
        transfer_arg = TransferSettings("student", 0.0, transfer.k)
        return fit_classifier(net, train, test, hyper, seed, transfer=transfer_arg, resume=resume,
                              checkpoint_path=checkpoint_path, meta=meta, **kwargs)
    if teacher is not None and not teacher.frozen:
        teacher.freeze()
    return fit_classifier(net, train, test, hyper, seed, transfer=transfer, teacher=teacher,
                          stack=stack, resume=resume, checkpoint_path=checkpoint_path, meta=meta,
                          **kwargs)


# -- phase 1: MHAN ----------------------------------------------------------------

def train_mhan(teacher: Network, stack: MhgdStack, train: LabeledImageSet, hyper: TrainHyper,
               seed: int, k: int = 1, d_att: int = 64, d1: int = 128,
               resume: Optional[Checkpoint] = None, checkpoint_path=None,
               meta: Optional[Dict[str, str]] = None, prior: Optional[RunMetrics] = None,
               metrics_dir=None):
    """Fit attention heads and estimators on a frozen teacher's sensed maps.

    Returns ``(stack, optimizer_state, metrics)``; the metrics' accuracy
    column holds the mean cosine similarity in percent.
    """
    if [tuple(d) for d in stack.dims] != teacher.tap_dims:
        raise ContractError(f"stack pair dims {stack.dims} do not match teacher taps {teacher.tap_dims}")
    teacher.freeze()
    params = stack.named_parameters()
    for p in params.values():
        p.requires_grad = True
    rng = np.random.default_rng([seed, 2])
    opt = OptimizerState(lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    if resume is not None:
        saved = resume.section("param/")
        for name, p in params.items():
            p.data = saved[name].copy()
    start, rng = _resume(resume, opt, rng)
    metrics = _start_metrics(prior, {"method": "mhan", "stage": "mhan", "seed": str(seed), **(meta or {})})
    sched = hyper.schedule
    for epoch in range(start, hyper.epochs):
        opt.lr = lr_at_epoch(sched, epoch)
        t0 = time.perf_counter()
        loss_sum = cos_sum = 0.0
        steps = skipped = 0
        for step, (x, _) in enumerate(_batch_stream(train, hyper, rng)):
            _, pairs = teacher.forward(x, train=False)
            try:
                sets = compress_pairs(pairs, k)
            except DegenerateRankError as exc:
                skipped += 1
                log.warning("epoch %d step %d skipped: %s", epoch + 1, step, exc)
                continue
            loss, cosines = mhan_loss(stack, sets)
            value = float(loss.data)
            _check_finite(value, "MHAN loss", epoch, step)
            if "initial_loss" not in metrics.meta and resume is None:
                metrics.meta["initial_loss"] = repr(value)
            _step(params, loss, opt)
            loss_sum += value
            cos_sum += float(np.mean(cosines))
            steps += 1
        if skipped > MAX_SKIP_FRACTION * (steps + skipped) or steps == 0:
            raise TrainingAborted(f"epoch {epoch + 1}: skipped {skipped} of {steps + skipped} batches")
        metrics.add(epoch + 1, "train", loss_sum / steps, 0.0, 100.0 * cos_sum / steps, opt.lr,
                    time.perf_counter() - t0)
        log.info("mhan epoch %d: loss %.4f cos %.4f", epoch + 1, loss_sum / steps, cos_sum / steps)
        if metrics_dir is not None:
            metrics.write(metrics_dir)
        if checkpoint_path is not None:
            checkpoint_save(stack_checkpoint(stack, opt, epoch + 1, rng, d_att, d1), checkpoint_path)
    if metrics_dir is not None:
        metrics.write(metrics_dir)
    if checkpoint_path is not None and start >= hyper.epochs:
        checkpoint_save(stack_checkpoint(stack, opt, start, rng, d_att, d1), checkpoint_path)
    for p in params.values():
        p.requires_grad = False
    return stack, opt, metrics
