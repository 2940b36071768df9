import numpy as np
import pytest

from mhgd import ops
from mhgd.gradcheck import (
    OP_TARGETS,
    SVD_TARGETS,
    check_function,
    known_scopes,
    relative_error,
    run_scope,
    targets_for,
)


def test_scopes_cover_every_target():
    assert set(targets_for("all")) == set(OP_TARGETS) | set(SVD_TARGETS)
    assert set(targets_for("ops")) == set(OP_TARGETS)
    assert set(targets_for("svd")) == {"svd_compress", "svd_compress_wide", "pipeline"}
    assert {"all", "ops", "svd", "softmax_rows", "pipeline"} <= set(known_scopes())
    with pytest.raises(KeyError):
        targets_for("bogus")


def test_relative_error_is_normwise():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_checker_catches_a_wrong_gradient():
    from mhgd.tensor import make_result

    def bad_square(x):
        def backward(g):
            return (g * 3.0 * x.data,)
        return make_result(x.data ** 2, (x,), backward, "bad_square")

    arrays = [np.random.default_rng(0).normal(size=5)]
    assert check_function(lambda x: ops.sum(ops.mul(x, x)), arrays) < 1e-8
    assert check_function(lambda x: ops.sum(bad_square(x)), arrays) > 0.1


@pytest.mark.parametrize("scope", ["softmax_rows", "conv2d_strided", "batch_norm"])
def test_single_op_scopes_pass(scope):
    (result,) = run_scope(scope, seeds=5)
    assert result.passed, result.line()
    assert result.line().startswith("PASS")


def test_pipeline_scope_passes():
    (result,) = run_scope("pipeline", seeds=5)
    assert result.threshold == 1e-3
    assert result.passed, result.line()
