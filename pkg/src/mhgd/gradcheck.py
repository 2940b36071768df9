"""Central finite-difference checks for every differentiable operation.

Each target builds a scalar function of a few float64 arrays from a seeded
generator. The analytic gradient from :func:`backprop` is compared with
central differences using the norm-wise relative error
``|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import ops
from .attention import SMOOTHED, MhgdStack, mhgd_graphs, transfer_loss
from .svd import compress_feature_map
from .tensor import Tensor, backprop, no_grad, precision

STEP = 1e-5
OP_THRESHOLD = 1e-4
SVD_THRESHOLD = 1e-3
SEEDS = 20

Builder = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[np.ndarray]]]


@dataclass
class GradcheckResult:
    target: str
    max_rel_err: float
    threshold: float
    trials: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.threshold)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.target:<18} max rel err {self.max_rel_err:.3e}  "
                f"(threshold {self.threshold:g}, {self.trials} trials)")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                      h: float = STEP) -> List[np.ndarray]:
    def value(xs):
        with no_grad():
            return float(fn(*[Tensor(x, dtype=np.float64) for x in xs]).data)

    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value(arrays)
            flat[i] = orig - h
            down = value(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def check_function(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = STEP) -> float:
    """Max over inputs of the relative error between backprop and central differences."""
    with precision(np.float64):
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        analytic = backprop(fn(*leaves), leaves)
        numeric = numeric_gradients(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def _projected(op: Callable[..., Tensor], out_shape, rng) -> Callable[..., Tensor]:
    """Reduce a tensor-valued op to a scalar with a fixed random projection."""
    weights = rng.normal(size=out_shape)

    def fn(*xs):
        out = op(*xs)
        return ops.sum(ops.mul(out, Tensor(weights, dtype=out.dtype)))
    return fn


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x) + 0.0


def _elementwise(op, make=lambda rng, s: rng.normal(size=s)) -> Builder:
    def build(rng):
        x = make(rng, (3, 4))
        return _projected(op, x.shape, rng), [x]
    return build


def _binary(op) -> Builder:
    def build(rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))   # exercises broadcasting
        return _projected(op, (3, 4), rng), [a, b]
    return build


def _matmul(rng):
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 2))
    return _projected(ops.matmul, (3, 2), rng), [a, b]


def _linear(rng):
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    return _projected(ops.linear, (4, 2), rng), [x, w, b]


def _conv(stride, padding):
    def build(rng):
        x, w = rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3))
        out = ops.conv2d(Tensor(x), Tensor(w), stride, padding).shape
        return _projected(lambda a, b: ops.conv2d(a, b, stride, padding), out, rng), [x, w]
    return build


def _maxpool(rng):
    # Distinct values keep the argmax stable under the finite-difference step.
    x = rng.permutation(2 * 4 * 4 * 3).reshape(2, 4, 4, 3) * 0.01 + rng.uniform(0, 1e-3, (2, 4, 4, 3))
    return _projected(lambda a: ops.maxpool2d(a, 2, 2), (2, 2, 2, 3), rng), [x]


def _gap(rng):
    return _projected(ops.global_avg_pool, (2, 3), rng), [rng.normal(size=(2, 3, 3, 3))]


def _batch_norm(rng):
    x, g, b = rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=3)
    return _projected(lambda a, gg, bb: ops.batch_norm(a, gg, bb, mode="batch"), (5, 3), rng), [x, g, b]


def _batch_norm_map(rng):
    x, g, b = rng.normal(size=(2, 3, 3, 2)), rng.normal(size=2), rng.normal(size=2)
    return _projected(lambda a, gg, bb: ops.batch_norm(a, gg, bb, mode="batch"), x.shape, rng), [x, g, b]


def _reduce(op, axis):
    def build(rng):
        x = rng.normal(size=(3, 4))
        shape = np.asarray(op(Tensor(x), axis=axis).data).shape
        return _projected(lambda a: op(a, axis=axis), shape, rng), [x]
    return build


def _reshape(rng):
    return _projected(lambda a: ops.reshape(a, (4, 3)), (4, 3), rng), [rng.normal(size=(3, 4))]


def _transpose(rng):
    return _projected(ops.transpose, (4, 3), rng), [rng.normal(size=(3, 4))]


def _concat(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    return _projected(lambda x, y: ops.concat([x, y], axis=1), (3, 6), rng), [a, b]


def _stack(rng):
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    return _projected(lambda x, y: ops.stack([x, y]), (2, 3, 2), rng), [a, b]


def _cross_entropy(rng):
    labels = rng.integers(0, 4, size=5)
    return (lambda z: ops.cross_entropy(z, labels)), [rng.normal(size=(5, 4))]


def _kl_rows(rng):
    q = rng.dirichlet(np.ones(4), size=3)
    p_logits = rng.normal(size=(3, 4))
    # p enters through a softmax so the check stays on the simplex.
    return (lambda s: ops.kl_rows(ops.softmax_rows(s), Tensor(q, dtype=s.dtype))), [p_logits]


def _separated_maps(rng, n, hw, d, k=1):
    """Feature maps whose per-image spectra are well separated (gap ratio >= 0.3)."""
    maps = []
    for _ in range(n):
        u, _ = np.linalg.qr(rng.normal(size=(hw, d)))
        v, _ = np.linalg.qr(rng.normal(size=(d, d)))
        sigma = 3.0 * 0.5 ** np.arange(d)
        maps.append((u * sigma) @ v.T)
    side = int(round(np.sqrt(hw)))
    return np.stack(maps).reshape(n, side, side, d)


def _svd_compress(rng):
    x = _separated_maps(rng, 3, 9, 4)
    return _projected(lambda a: compress_feature_map(a, 1).vectors, (3, 4), rng), [x]


def _svd_compress_wide(rng):
    # More channels than spatial positions exercises the transposed branch.
    x = _separated_maps(rng, 2, 4, 4)[..., :4]
    x = np.concatenate([x, rng.normal(size=x.shape) * 0.1], axis=-1)
    return _projected(lambda a: compress_feature_map(a, 1).vectors, (2, 8), rng), [x]


def _stack64(seed: int, dims, heads: int, d_att: int, d1: int) -> MhgdStack:
    stack = MhgdStack.init(dims, heads=heads, d_att=d_att, d1=d1, seed=seed)
    for p in stack.named_parameters().values():
        p.data = p.data.astype(np.float64)
        p.requires_grad = False
    return stack


def pipeline_builder(n: int = 3, d: int = 4, k: int = 1, heads: int = 2) -> Builder:
    """transfer_loss as a function of the student's frontend and backend maps."""
    def build(rng):
        stack = _stack64(int(rng.integers(1 << 30)), [(d, d)], heads, d, d)
        t_front, t_back = _separated_maps(rng, n, 9, d), _separated_maps(rng, n, 9, d)
        with precision(np.float64), no_grad():
            t_sets = [(compress_feature_map(Tensor(t_front), k), compress_feature_map(Tensor(t_back), k))]
            teacher = mhgd_graphs(stack, t_sets, SMOOTHED)

        def fn(front, back):
            s_sets = [(compress_feature_map(front, k), compress_feature_map(back, k))]
            return transfer_loss(teacher, mhgd_graphs(stack, s_sets, SMOOTHED))
        return fn, [_separated_maps(rng, n, 9, d), _separated_maps(rng, n, 9, d)]
    return build


OP_TARGETS: Dict[str, Builder] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "scale": _elementwise(lambda x: ops.scale(x, -1.7)),
    "relu": _elementwise(ops.relu, _away_from_zero),
    "tanh": _elementwise(ops.tanh),
    "exp": _elementwise(ops.exp),
    "log": _elementwise(ops.log, lambda rng, s: rng.uniform(0.5, 2.0, s)),
    "clamp_min": _elementwise(lambda x: ops.clamp_min(x, 0.1),
                              lambda rng, s: _away_from_zero(rng, s) + 0.1),
    "sum": _reduce(ops.sum, 0),
    "mean": _reduce(ops.mean, 1),
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "stack": _stack,
    "matmul": _matmul,
    "linear": _linear,
    "conv2d": _conv(1, 1),
    "conv2d_strided": _conv(2, 0),
    "maxpool2d": _maxpool,
    "global_avg_pool": _gap,
    "batch_norm": _batch_norm,
    "batch_norm_map": _batch_norm_map,
    "softmax_rows": _elementwise(ops.softmax_rows),
    "log_softmax_rows": _elementwise(ops.log_softmax_rows),
    "l2_normalize_rows": _elementwise(ops.l2_normalize_rows),
    "cross_entropy": _cross_entropy,
    "kl_rows": _kl_rows,
}

SVD_TARGETS: Dict[str, Builder] = {
    "svd_compress": _svd_compress,
    "svd_compress_wide": _svd_compress_wide,
    "pipeline": pipeline_builder(),
}

SCOPES = ("all", "ops", "svd")


def targets_for(scope: str) -> Dict[str, Tuple[Builder, float]]:
    ops_t = {k: (v, OP_THRESHOLD) for k, v in OP_TARGETS.items()}
    svd_t = {k: (v, SVD_THRESHOLD) for k, v in SVD_TARGETS.items()}
    if scope == "all":
        return {**ops_t, **svd_t}
    if scope == "ops":
        return ops_t
    if scope == "svd":
        return svd_t
    if scope in ops_t:
        return {scope: ops_t[scope]}
    if scope in svd_t:
        return {scope: svd_t[scope]}
    raise KeyError(scope)


def known_scopes() -> List[str]:
    return list(SCOPES) + list(OP_TARGETS) + list(SVD_TARGETS)


def run_target(name: str, builder: Builder, threshold: float, seeds: int = SEEDS) -> GradcheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, len(name)])
        with precision(np.float64):
            fn, arrays = builder(rng)
        worst = max(worst, check_function(fn, arrays))
    return GradcheckResult(name, worst, threshold, seeds)


def run_scope(scope: str = "all", seeds: int = SEEDS) -> List[GradcheckResult]:
    """Run every target in ``scope``; raises ``KeyError`` for an unknown scope."""
    return [run_target(name, b, thr, seeds) for name, (b, thr) in targets_for(scope).items()]
