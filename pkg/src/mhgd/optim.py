"""SGD with Nesterov momentum and milestone learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .tensor import ContractError, DimensionError, Tensor


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_nesterov_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                      state: OptimizerState) -> None:
    """Update ``params`` in place.

    With ``g' = g + wd * w``: ``v <- mu * v + g'`` then ``w <- w - lr * (g' + mu * v)``.
    """
    mu, lr, wd = state.momentum, state.lr, state.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        elif v.shape != p.shape:
            raise DimensionError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        dt = p.data.dtype.type
        g_eff = g + dt(wd) * p.data if wd else g
        v *= dt(mu)
        v += g_eff
        if lr:
            p.data -= dt(lr) * (g_eff + dt(mu) * v)


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    milestones: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        epochs = [e for e, _ in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ContractError(f"milestones must be strictly increasing, got {epochs}")
        if any(m <= 0 for _, m in self.milestones):
            raise ContractError("milestone multipliers must be positive")

    @classmethod
    def parse(cls, initial: float, text: Optional[str]) -> "LrSchedule":
        """Build from ``"100:0.1, 150:0.1"`` style text."""
        pairs: List[Tuple[int, float]] = []
        for chunk in (text or "").split(","):
            chunk = chunk.strip()
            if not chunk:
                continue
            epoch, mult = chunk.split(":")
            pairs.append((int(epoch), float(mult)))
        return cls(float(initial), tuple(pairs))


def lr_at_epoch(sched: LrSchedule, epoch: int) -> float:
    rate = sched.initial
    for milestone, mult in sched.milestones:
        if milestone <= epoch:
            rate *= mult
    return rate
