import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mhgd import ops
from mhgd.tensor import DimensionError, ContractError, NumericalError, Tensor, backprop, checked, precision


def T(x, **kw):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64, **kw)


# -- naive oracles ------------------------------------------------------------------

def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv_loops(x, w, stride, pad):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += xp[b, i * stride + di, j * stride + dj, c] * w[di, dj, c, o]
                    out[b, i, j, o] = acc
    return out


def maxpool_loops(x, window, stride):
    n, h, w, c = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, oh, ow, c))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    out[b, i, j, ch] = max(x[b, i * stride + di, j * stride + dj, ch]
                                           for di in range(window) for dj in range(window))
    return out


# -- matmul ---------------------------------------------------------------------------

def test_matmul_identity_and_hand_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(T(np.eye(2)), T(a)).data, a)
    np.testing.assert_array_equal(ops.matmul(T([[1, 2]]), T([[3], [4]])).data, [[11]])


def test_matmul_matches_loop_oracle(rng):
    a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(ops.matmul(T(a), T(b)).data, matmul_loops(a, b), rtol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(T(np.ones((2, 3))), T(np.ones((4, 5))))


def test_matmul_backward_formula(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    g = rng.normal(size=(3, 2))
    with precision(np.float64):
        ta, tb = T(a, requires_grad=True), T(b, requires_grad=True)
        ga, gb = backprop(ops.sum(ops.mul(ops.matmul(ta, tb), T(g))), [ta, tb])
    np.testing.assert_allclose(ga, g @ b.T, rtol=1e-12)
    np.testing.assert_allclose(gb, a.T @ g, rtol=1e-12)


# -- conv2d ------------------------------------------------------------------------------

def test_conv_identity_kernel_is_identity(rng):
    x = rng.normal(size=(2, 5, 5, 3)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
    out = ops.conv2d(Tensor(x), Tensor(w)).data
    assert np.max(np.abs(out - x)) <= 1e-7


def test_conv_hand_sum():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1)
    out = ops.conv2d(T(x), T(np.ones((2, 2, 1, 1))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x, w = rng.normal(size=(2, 6, 5, 3)), rng.normal(size=(3, 3, 3, 4))
    out = ops.conv2d(T(x), T(w), stride, pad).data
    expected = conv_loops(x, w, stride, pad)
    assert out.shape == expected.shape
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-12)


def test_conv_output_size_formula():
    out = ops.conv2d(T(np.ones((1, 7, 9, 1))), T(np.ones((3, 2, 1, 1))), stride=2, padding=1)
    assert out.shape == (1, (7 + 2 - 3) // 2 + 1, (9 + 2 - 2) // 2 + 1, 1)


def test_conv_kernel_larger_than_input_fails():
    with pytest.raises(DimensionError):
        ops.conv2d(T(np.ones((1, 2, 2, 1))), T(np.ones((3, 3, 1, 1))))


# -- maxpool -----------------------------------------------------------------------------

def test_maxpool_constant_and_hand_cases():
    np.testing.assert_array_equal(ops.maxpool2d(T(np.full((1, 4, 4, 2), 7.0)), 2, 2).data,
                                  np.full((1, 2, 2, 2), 7.0))
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert ops.maxpool2d(T(x), 2, 2).data.item() == 4.0


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (2, 1)])
def test_maxpool_matches_loop_oracle_exactly(rng, window, stride):
    x = rng.normal(size=(2, 6, 5, 3))
    np.testing.assert_array_equal(ops.maxpool2d(T(x), window, stride).data, maxpool_loops(x, window, stride))


def test_maxpool_ties_route_to_first_occurrence():
    x = T(np.ones((1, 2, 2, 1)), requires_grad=True)
    backprop(ops.sum(ops.maxpool2d(x, 2, 2)), [x])
    np.testing.assert_array_equal(x.grad.reshape(2, 2), [[1, 0], [0, 0]])


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        ops.maxpool2d(T(np.ones((1, 2, 2, 1))), 3, 1)


# -- batch norm ----------------------------------------------------------------------------

def test_batch_norm_constant_batch_is_zero():
    out = ops.batch_norm(T(np.full((4, 3), 5.0)), T(np.ones(3)), T(np.zeros(3)))
    assert np.max(np.abs(out.data)) <= math.sqrt(1e-5)


def test_batch_norm_unit_variance_batch_is_unchanged():
    x = np.array([[-1.0, 1.0], [1.0, -1.0]])
    out = ops.batch_norm(T(x), T(np.ones(2)), T(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_batch_norm_running_mean_decay(rng):
    x = rng.normal(loc=3.0, size=(8, 2, 2, 4))
    rm, rv = np.zeros(4), np.ones(4)
    ops.batch_norm(T(x), T(np.ones(4)), T(np.zeros(4)), running_mean=rm, running_var=rv)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1, 2)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 1, 2)), rtol=1e-12)


def test_batch_norm_map_matches_direct_formula(rng):
    x, g, b = rng.normal(size=(3, 2, 2, 5)), rng.normal(size=5), rng.normal(size=5)
    mu, var = x.mean(axis=(0, 1, 2)), x.var(axis=(0, 1, 2))
    expected = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(ops.batch_norm(T(x), T(g), T(b)).data, expected, rtol=1e-10)


def test_batch_norm_running_mode_uses_buffers(rng):
    x = rng.normal(size=(1, 3))
    rm, rv = np.array([1.0, 2.0, 3.0]), np.array([4.0, 1.0, 0.25])
    out = ops.batch_norm(T(x), None, None, mode="running", running_mean=rm, running_var=rv)
    np.testing.assert_allclose(out.data, (x - rm) / np.sqrt(rv + 1e-5), rtol=1e-10)


def test_batch_norm_needs_two_items_in_batch_mode():
    with pytest.raises(ContractError):
        ops.batch_norm(T(np.ones((1, 3))), None, None)


# -- elementwise -----------------------------------------------------------------------------

def test_elementwise_hand_values():
    np.testing.assert_array_equal(ops.relu(T([-2.0, 3.0])).data, [0.0, 3.0])
    assert ops.tanh(T([0.0])).data[0] == 0.0
    assert ops.tanh(Tensor([1000.0])).data[0] == 1.0
    assert ops.sum(T([1, 2, 3])).item() == 6.0
    assert ops.mean(T([1, 2, 3])).item() == 2.0


def test_relu_subgradient_at_zero_is_zero():
    x = T([0.0], requires_grad=True)
    backprop(ops.sum(ops.relu(x)), [x])
    assert x.grad[0] == 0.0


def test_log_domain_error_in_checked_mode():
    with checked(), pytest.raises(NumericalError):
        ops.log(T([1.0, 0.0]))


def test_binary_broadcast_rules():
    out = ops.add(T(np.ones((2, 3))), T([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[2, 3, 4], [2, 3, 4]])
    with pytest.raises(DimensionError):
        ops.add(T(np.ones((2, 3))), T(np.ones((3, 2))))


# -- softmax / normalisation / cross entropy -----------------------------------------------------

def test_softmax_hand_values():
    np.testing.assert_allclose(ops.softmax_rows(T([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_array_equal(ops.softmax_rows(T([[1000.0, -1000.0]])).data, [[1.0, 0.0]])
    mpmath.mp.dps = 30
    denom = sum(mpmath.e ** i for i in (1, 2, 3))
    oracle = [float(mpmath.e ** i / denom) for i in (1, 2, 3)]
    np.testing.assert_allclose(oracle, [0.09003, 0.24473, 0.66524], atol=1e-5)
    np.testing.assert_allclose(ops.softmax_rows(T([[1.0, 2.0, 3.0]])).data[0], oracle, atol=1e-12)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(s):
    p = ops.softmax_rows(T(s)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_entries_strictly_inside_unit_interval_for_moderate_inputs(rng):
    p = ops.softmax_rows(T(rng.normal(size=(5, 7)) * 5)).data
    assert np.all(p > 0) and np.all(p < 1)


def test_log_softmax_matches_log_of_softmax(rng):
    s = rng.normal(size=(4, 6)) * 3
    np.testing.assert_allclose(ops.log_softmax_rows(T(s)).data, np.log(ops.softmax_rows(T(s)).data),
                               rtol=1e-12)


def test_l2_normalize_hand_cases(rng):
    np.testing.assert_allclose(ops.l2_normalize_rows(T([[3.0, 4.0]])).data, [[0.6, 0.8]])
    np.testing.assert_array_equal(ops.l2_normalize_rows(T([[0.0, 1.0]])).data, [[0.0, 1.0]])
    v = ops.l2_normalize_rows(Tensor(rng.normal(size=(10, 7)))).data
    np.testing.assert_allclose(np.linalg.norm(v.astype(np.float64), axis=1), 1.0, atol=1e-6)


@given(hnp.arrays(np.float32, (4, 5), elements=st.floats(-100, 100, width=32)))
def test_l2_normalize_is_idempotent(v):
    rows = np.linalg.norm(v.astype(np.float64), axis=1) > 1e-3
    once = ops.l2_normalize_rows(Tensor(v)).data
    twice = ops.l2_normalize_rows(Tensor(once)).data
    assert np.max(np.abs(twice[rows] - once[rows]), initial=0.0) <= 1e-7


def test_l2_normalize_zero_row_passes_and_flags_in_checked_mode():
    out = ops.l2_normalize_rows(T([[0.0, 0.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data[0], [0.0, 0.0])
    with checked(), pytest.raises(NumericalError):
        ops.l2_normalize_rows(T([[0.0, 0.0]]))


def test_cross_entropy_cases(rng):
    assert ops.cross_entropy(T(np.zeros((3, 5))), [0, 1, 4]).item() == pytest.approx(math.log(5))
    assert ops.cross_entropy(T([[50.0, -50.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    logits, labels = rng.normal(size=(6, 4)), rng.integers(0, 4, 6)
    direct = np.mean([-math.log(math.exp(logits[i, labels[i]]) / sum(math.exp(z) for z in logits[i]))
                      for i in range(6)])
    assert ops.cross_entropy(T(logits), labels).item() == pytest.approx(direct, rel=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ops.cross_entropy(T(np.zeros((2, 3))), [0, 3])


def test_kl_rows_hand_value():
    p, q = T([[0.5, 0.5]]), T([[0.25, 0.75]])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert ops.kl_rows(p, q).item() == pytest.approx(expected, abs=1e-12)
    assert ops.kl_rows(p, q).item() == pytest.approx(0.143841, abs=1e-5)
