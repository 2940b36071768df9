"""Multi-head attention graphs over batches of compressed feature vectors.

For one sensing pair the backend set ``vB`` acts as key and the frontend
set ``vF`` as query. Each head embeds both with FC+BN and turns the N x N
similarity matrix into a row-stochastic graph. The estimator uses the
graphs to predict ``vB`` from ``vF``, and that prediction is what trains the
heads. During transfer the heads are frozen and their smoothed graphs
are compared between teacher and student.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .svd import FeatureVectorSet
from .tensor import DimensionError, Tensor

PLAIN = "plain"
SMOOTHED = "smoothed"


class ConfigurationError(ValueError):
    pass


def he_normal(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(np.float32), requires_grad=True, dtype=np.float32)


def _param(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float32), requires_grad=True, dtype=np.float32)


@dataclass
class Embedding:
    """FC followed by batch-statistics BN; ``weight=None`` means identity (bypass)."""
    weight: Optional[Tensor]
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "Embedding":
        return cls(he_normal(rng, d_in, (d_in, d_out)), _param(np.ones(d_out)),
                   _param(np.zeros(d_out)))

    def __call__(self, v: Tensor) -> Tensor:
        if self.weight is None:
            return v
        h = ops.matmul(v, self.weight)
        if self.gamma is None:
            return h
        return ops.batch_norm(h, self.gamma, self.beta, mode="batch")

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out = {}
        for name in ("weight", "gamma", "beta"):
            t = getattr(self, name)
            if t is not None:
                out[f"{prefix}.{name}"] = t
        return out


@dataclass
class AttentionHeadParams:
    theta: Embedding     # backend (key) embedding, D^B -> D_att
    phi: Embedding       # frontend (query) embedding, D^F -> D_att
    index: int = 0

    @classmethod
    def init(cls, rng, d_front: int, d_back: int, d_att: int, index: int = 0):
        return cls(Embedding.init(rng, d_back, d_att), Embedding.init(rng, d_front, d_att), index)

    @classmethod
    def bypass(cls, index: int = 0):
        return cls(Embedding(None), Embedding(None), index)

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {**self.theta.named_parameters(f"{prefix}.theta"),
                **self.phi.named_parameters(f"{prefix}.phi")}


@dataclass
class EstimatorParams:
    f1: Embedding                    # FC + BN (+ ReLU unless bypassed), D^F -> D1
    w2: Optional[Tensor]             # (A * D1, D^B); None = identity
    b2: Optional[Tensor] = None

    @classmethod
    def init(cls, rng, d_front: int, d_back: int, d1: int, heads: int):
        return cls(Embedding.init(rng, d_front, d1),
                   he_normal(rng, heads * d1, (heads * d1, d_back)),
                   _param(np.zeros(d_back)))

    @classmethod
    def bypass(cls):
        return cls(Embedding(None), None, None)

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out = self.f1.named_parameters(f"{prefix}.f1")
        if self.w2 is not None:
            out[f"{prefix}.f2.weight"] = self.w2
        if self.b2 is not None:
            out[f"{prefix}.f2.bias"] = self.b2
        return out


@dataclass
class AttentionGraph:
    heads: List[Tensor]      # A tensors of shape N x N, row-stochastic
    mode: str = PLAIN
    pair: int = 0

    @property
    def values(self) -> np.ndarray:
        return np.stack([h.data for h in self.heads])


@dataclass
class PairGroup:
    heads: List[AttentionHeadParams]
    estimator: EstimatorParams


@dataclass
class MhgdStack:
    groups: List[PairGroup]
    dims: List[Tuple[int, int]] = field(default_factory=list)   # (D^F, D^B) per pair

    @classmethod
    def init(cls, tap_dims: Sequence[Tuple[int, int]], heads: int = 8, d_att: int = 64,
             d1: int = 128, seed: int = 0) -> "MhgdStack":
        if heads < 1 or len(tap_dims) < 1:
            raise ConfigurationError("an MHGD stack needs at least one pair and one head")
        rng = np.random.default_rng(seed)
        groups = []
        for d_front, d_back in tap_dims:
            hs = [AttentionHeadParams.init(rng, d_front, d_back, d_att, a) for a in range(heads)]
            groups.append(PairGroup(hs, EstimatorParams.init(rng, d_front, d_back, d1, heads)))
        return cls(groups, [tuple(d) for d in tap_dims])

    @property
    def num_pairs(self) -> int:
        return len(self.groups)

    @property
    def num_heads(self) -> int:
        return len(self.groups[0].heads)

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for m, group in enumerate(self.groups):
            for a, head in enumerate(group.heads):
                out.update(head.named_parameters(f"pair{m}.head{a}"))
            out.update(group.estimator.named_parameters(f"pair{m}.estimator"))
        return out


def attention_similarity(head: AttentionHeadParams, vB: FeatureVectorSet,
                         vF: FeatureVectorSet) -> Tensor:
    """``S[i, j] = <theta(vB_i), phi(vF_j)>``."""
    if vB.size != vF.size:
        raise DimensionError(f"set sizes differ: backend {vB.size}, frontend {vF.size}")
    key = head.theta(vB.vectors)
    query = head.phi(vF.vectors)
    if key.shape[1] != query.shape[1]:
        raise DimensionError(f"embedded dims differ: {key.shape[1]} vs {query.shape[1]}")
    return ops.matmul(key, ops.transpose(query))


def attention_graph(similarities: Sequence[Tensor], mode: str = PLAIN, pair: int = 0) -> AttentionGraph:
    if mode not in (PLAIN, SMOOTHED):
        raise ValueError(f"unknown graph mode {mode!r}")
    heads = []
    for s in similarities:
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise DimensionError(f"similarity must be square, got {s.shape}")
        heads.append(ops.softmax_rows(ops.tanh(s) if mode == SMOOTHED else s))
    return AttentionGraph(heads, mode, pair)


def estimator_forward(est: EstimatorParams, graph: AttentionGraph,
                      vF: FeatureVectorSet) -> FeatureVectorSet:
    n = vF.size
    if graph.heads[0].shape[0] != n:
        raise DimensionError(f"graph batch {graph.heads[0].shape[0]} vs set size {n}")
    h = est.f1(vF.vectors)
    if est.f1.weight is not None:
        h = ops.relu(h)
    contexts = [ops.matmul(g, h) for g in graph.heads]
    ctx = contexts[0] if len(contexts) == 1 else ops.concat(contexts, axis=1)
    if est.w2 is not None:
        if est.w2.shape[0] != ctx.shape[1]:
            raise ConfigurationError(f"estimator expects {est.w2.shape[0]} input features, "
                                     f"got {ctx.shape[1]} from {len(contexts)} heads")
        ctx = ops.linear(ctx, est.w2, est.b2)
    return FeatureVectorSet(ops.l2_normalize_rows(ctx), "estimate")


def pair_graph(group: PairGroup, vF: FeatureVectorSet, vB: FeatureVectorSet,
               mode: str, pair: int = 0) -> AttentionGraph:
    sims = [attention_similarity(h, vB, vF) for h in group.heads]
    return attention_graph(sims, mode, pair)


def mhgd_graphs(stack: MhgdStack, tap_pairs: Sequence[Tuple[FeatureVectorSet, FeatureVectorSet]],
                mode: str = SMOOTHED) -> List[AttentionGraph]:
    """Graphs for every sensing pair; ``tap_pairs`` holds ``(vF, vB)`` tuples."""
    if len(tap_pairs) != stack.num_pairs:
        raise ConfigurationError(f"{len(tap_pairs)} tap pairs for a stack of {stack.num_pairs}")
    return [pair_graph(g, vF, vB, mode, m) for m, (g, (vF, vB)) in enumerate(zip(stack.groups, tap_pairs))]


def cosine_loss(estimate: FeatureVectorSet, target: FeatureVectorSet) -> Tuple[Tensor, float]:
    """``(1/N) * sum_i (1 - <target_i, estimate_i>)`` and the mean cosine."""
    dots = ops.sum(ops.mul(estimate.vectors, target.vectors), axis=1)
    ones = Tensor(np.ones(target.size, dtype=dots.dtype), dtype=dots.dtype)
    return ops.mean(ops.sub(ones, dots)), float(dots.data.mean())


def mhan_loss(stack: MhgdStack, tap_pairs: Sequence[Tuple[FeatureVectorSet, FeatureVectorSet]]):
    """Sum over pairs of the mean cosine complement between estimated and true backend vectors.

    Returns ``(loss, mean_cosines)`` with one mean cosine per pair.
    """
    graphs = mhgd_graphs(stack, tap_pairs, PLAIN)
    total, cosines = None, []
    for group, graph, (vF, vB) in zip(stack.groups, graphs, tap_pairs):
        est = estimator_forward(group.estimator, graph, vF)
        term, cos = cosine_loss(est, vB)
        total = term if total is None else ops.add(total, term)
        cosines.append(cos)
    return total, cosines


def transfer_loss(teacher_graphs: Sequence[AttentionGraph],
                  student_graphs: Sequence[AttentionGraph]) -> Tensor:
    """KL(student || teacher) summed over pairs, heads and rows; teacher is constant."""
    if len(teacher_graphs) != len(student_graphs):
        raise DimensionError(f"{len(teacher_graphs)} teacher vs {len(student_graphs)} student graphs")
    total = None
    for gt, gs in zip(teacher_graphs, student_graphs):
        if len(gt.heads) != len(gs.heads):
            raise DimensionError("teacher and student graphs have different head counts")
        for ht, hs in zip(gt.heads, gs.heads):
            if ht.shape != hs.shape:
                raise DimensionError(f"graph shapes differ: {ht.shape} vs {hs.shape}")
            term = ops.kl_rows(hs, ht)
            total = term if total is None else ops.add(total, term)
    return total
