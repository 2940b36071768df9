"""Desk-scale teacher/student CNNs with sensing taps, and the baseline KD losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import ops
from .attention import ConfigurationError, he_normal
from .svd import FeatureVectorSet, sign_align_pair
from .tensor import DimensionError, Tensor, no_grad

FAMILIES = ("vgg", "wrn")


@dataclass(frozen=True)
class NetworkSpec:
    family: str = "vgg"
    blocks: Tuple[int, ...] = (1, 1, 1)          # conv layers (vgg) or residual units (wrn) per block
    widths: Tuple[int, ...] = (8, 16, 32)
    input_shape: Tuple[int, int, int] = (16, 16, 3)
    num_classes: int = 4
    taps: int = 2
    role: str = "student"

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown network family {self.family!r}")
        if not self.blocks or len(self.blocks) != len(self.widths):
            raise ConfigurationError("blocks and widths must be non-empty and of equal length")
        if min(self.blocks) < 1 or min(self.widths) < 1:
            raise ConfigurationError("block depths and widths must be positive")
        if not 1 <= self.taps <= len(self.blocks):
            raise ConfigurationError(f"taps={self.taps} must lie in [1, {len(self.blocks)}]")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")


@dataclass(frozen=True)
class SensingTap:
    pair: int
    block: int
    frontend: str      # layer id whose output is sensed
    backend: str
    front_depth: int
    back_depth: int


def tap_layout(spec: NetworkSpec) -> List[SensingTap]:
    """Sensing pairs on the last ``spec.taps`` blocks: block input -> block output."""
    spec.validate()
    first = len(spec.blocks) - spec.taps
    taps = []
    for m, b in enumerate(range(first, len(spec.blocks))):
        if b == 0:
            front_depth = spec.input_shape[2] if spec.family == "vgg" else spec.widths[0]
            front = "input" if spec.family == "vgg" else "stem"
        else:
            front_depth, front = spec.widths[b - 1], f"block{b - 1}"
        taps.append(SensingTap(m, b, front, f"block{b}", front_depth, spec.widths[b]))
    return taps


def check_tap_pairing(teacher: Sequence[SensingTap], student: Sequence[SensingTap]) -> None:
    if len(teacher) != len(student):
        raise ConfigurationError(f"teacher has {len(teacher)} sensing pairs, student {len(student)}")
    for t, s in zip(teacher, student):
        if (t.front_depth, t.back_depth) != (s.front_depth, s.back_depth):
            raise ConfigurationError(
                f"sensing pair {t.pair}: teacher depths ({t.front_depth}, {t.back_depth}) "
                f"!= student depths ({s.front_depth}, {s.back_depth})")


class Network:
    """Parameters, BN running buffers and the forward pass of one CNN."""

    def __init__(self, spec: NetworkSpec, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.taps = tap_layout(spec)
        self.frozen = False

    def freeze(self) -> "Network":
        for p in self.params.values():
            p.requires_grad = False
        self.frozen = True
        return self

    @property
    def tap_dims(self) -> List[Tuple[int, int]]:
        return [(t.front_depth, t.back_depth) for t in self.taps]

    # -- layers -------------------------------------------------------------
    def _bn(self, name: str, h: Tensor, train: bool) -> Tensor:
        return ops.batch_norm(h, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                              mode="batch" if train else "running",
                              running_mean=self.buffers[f"{name}.running_mean"],
                              running_var=self.buffers[f"{name}.running_var"])

    def _conv_bn(self, name: str, h: Tensor, train: bool, stride: int = 1, act: bool = True) -> Tensor:
        w = self.params[f"{name}.weight"]
        h = ops.conv2d(h, w, stride=stride, padding=w.shape[0] // 2)
        h = self._bn(f"{name}.bn", h, train)
        return ops.relu(h) if act else h

    def forward(self, x: Tensor, train: bool = False):
        """Return ``(logits, [(front_map, back_map), ...])``."""
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise DimensionError(f"expected batch of shape N x {self.spec.input_shape}, got {x.shape}")
        if self.frozen:
            train = False
            with no_grad():
                return self._forward(x, train)
        return self._forward(x, train)

    def _forward(self, x: Tensor, train: bool):
        spec = self.spec
        tapped = {t.block: t for t in self.taps}
        pairs = []
        h = x
        if spec.family == "wrn":
            h = self._conv_bn("stem", h, train)
        for b, depth in enumerate(spec.blocks):
            front = h
            if spec.family == "vgg":
                for c in range(depth):
                    h = self._conv_bn(f"block{b}.conv{c}", h, train)
            else:
                for u in range(depth):
                    stride = 2 if (b > 0 and u == 0) else 1
                    h = self._residual(f"block{b}.unit{u}", h, train, stride)
            if b in tapped:
                pairs.append((front, h))
            if spec.family == "vgg" and b < len(spec.blocks) - 1:
                h = ops.maxpool2d(h, 2, 2)
        feats = ops.global_avg_pool(h)
        logits = ops.linear(feats, self.params["fc.weight"], self.params["fc.bias"])
        return logits, pairs

    def _residual(self, name: str, h: Tensor, train: bool, stride: int) -> Tensor:
        y = self._conv_bn(f"{name}.conv0", h, train, stride=stride)
        y = self._conv_bn(f"{name}.conv1", y, train, act=False)
        if f"{name}.proj.weight" in self.params:
            shortcut = self._conv_bn(f"{name}.proj", h, train, stride=stride, act=False)
        else:
            shortcut = h
        return ops.relu(ops.add(y, shortcut))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """He-initialised network; same spec and seed give bit-identical parameters."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}

    def conv(name: str, cin: int, cout: int, k: int = 3):
        params[f"{name}.weight"] = he_normal(rng, k * k * cin, (k, k, cin, cout))
        params[f"{name}.bn.gamma"] = Tensor(np.ones(cout, np.float32), requires_grad=True)
        params[f"{name}.bn.beta"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        buffers[f"{name}.bn.running_mean"] = np.zeros(cout, np.float32)
        buffers[f"{name}.bn.running_var"] = np.ones(cout, np.float32)

    cin = spec.input_shape[2]
    if spec.family == "wrn":
        conv("stem", cin, spec.widths[0])
        cin = spec.widths[0]
    for b, (depth, width) in enumerate(zip(spec.blocks, spec.widths)):
        for u in range(depth):
            if spec.family == "vgg":
                conv(f"block{b}.conv{u}", cin, width)
            else:
                stride = 2 if (b > 0 and u == 0) else 1
                conv(f"block{b}.unit{u}.conv0", cin, width)
                conv(f"block{b}.unit{u}.conv1", width, width)
                if stride != 1 or cin != width:
                    conv(f"block{b}.unit{u}.proj", cin, width, k=1)
            cin = width
    params["fc.weight"] = he_normal(rng, cin, (cin, spec.num_classes))
    params["fc.bias"] = Tensor(np.zeros(spec.num_classes, np.float32), requires_grad=True)
    return Network(spec, params, buffers)


def forward_with_sensing(net: Network, batch: Tensor, train: bool = False):
    return net.forward(batch, train=train)


def soft_logits_loss(teacher_logits: Tensor, student_logits: Tensor, temperature: float = 4.0) -> Tensor:
    """``tau^2 * KL(softmax(t/tau) || softmax(s/tau))`` averaged over the batch."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}")
    tau = float(temperature)
    t = teacher_logits.data.astype(np.float64) / tau
    t = t - t.max(axis=1, keepdims=True)
    log_pt = t - np.log(np.exp(t).sum(axis=1, keepdims=True))
    dtype = student_logits.dtype
    pt = Tensor(np.exp(log_pt), dtype=dtype)
    log_ps = ops.log_softmax_rows(ops.scale(student_logits, 1.0 / tau))
    kl = ops.sum(ops.mul(pt, ops.sub(Tensor(log_pt, dtype=dtype), log_ps)))
    return ops.scale(kl, tau * tau / student_logits.shape[0])


def feature_l2_loss(teacher_sets: Sequence[FeatureVectorSet],
                    student_sets: Sequence[FeatureVectorSet], align: bool = True) -> Tensor:
    """Sum over pairs of the mean squared distance between sign-aligned vectors."""
    if len(teacher_sets) != len(student_sets):
        raise DimensionError(f"{len(teacher_sets)} teacher vs {len(student_sets)} student sets")
    total = None
    for t, s in zip(teacher_sets, student_sets):
        if t.vectors.shape != s.vectors.shape:
            raise DimensionError(f"vector sets differ: {t.vectors.shape} vs {s.vectors.shape}")
        if align:
            s = sign_align_pair(s, t)
        diff = ops.sub(s.vectors, Tensor(t.vectors.data, dtype=s.vectors.dtype))
        term = ops.scale(ops.sum(ops.mul(diff, diff)), 1.0 / s.size)
        total = term if total is None else ops.add(total, term)
    return total
