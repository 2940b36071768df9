import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mhgd import ops
from mhgd.svd import (
    GRAD_CLIP,
    DegenerateRankError,
    FeatureVectorSet,
    _batched_svd,
    compress_feature_map,
    jacobi_eigh,
    reconstruction_error,
    sign_align_pair,
    svd_backward,
    truncated_svd,
)
from mhgd.tensor import DimensionError, Tensor, backprop, precision


def oracle_vectors(f, k):
    """Top-k right singular vectors from numpy's dense SVD, sign fixed column by column."""
    _, s, vt = np.linalg.svd(np.asarray(f, dtype=np.float64), full_matrices=False)
    cols = []
    for j in range(k):
        v = vt[j].copy()
        pivot = int(np.argmax(np.abs(v)))
        cols.append(-v if v[pivot] < 0 else v)
    return s[:k], np.stack(cols, axis=1)


def test_diagonal_matrix():
    res = truncated_svd(np.array([[3.0, 0.0], [0.0, 2.0]]), 2)
    np.testing.assert_allclose(res.sigma, [3.0, 2.0], rtol=1e-12)
    np.testing.assert_allclose(res.V, np.eye(2), atol=1e-12)


def test_single_row():
    res = truncated_svd(np.array([[3.0, 4.0]]), 1)
    assert res.sigma[0] == pytest.approx(5.0)
    np.testing.assert_allclose(res.V[:, 0], [0.6, 0.8], atol=1e-12)


def test_rank_one_outer_product_and_degenerate_k():
    f = np.array([[1.0, 2.0], [2.0, 4.0]])
    res = truncated_svd(f, 1)
    assert res.sigma[0] == pytest.approx(5.0)
    np.testing.assert_allclose(res.V[:, 0], [0.4472, 0.8944], atol=1e-4)
    with pytest.raises(DegenerateRankError, match="k=2"):
        truncated_svd(f, 2)


def test_k_out_of_range():
    with pytest.raises(DimensionError):
        truncated_svd(np.ones((3, 2)), 3)


@pytest.mark.parametrize("shape", [(6, 4), (4, 6), (9, 9), (20, 5)])
def test_matches_dense_oracle(rng, shape):
    f = rng.normal(size=shape)
    k = min(shape) - 1
    res = truncated_svd(f, k)
    s, v = oracle_vectors(f, k)
    np.testing.assert_allclose(res.sigma, s, rtol=1e-8)
    np.testing.assert_allclose(res.V, v, atol=1e-7)


@settings(max_examples=40)
@given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-10, 10, allow_nan=False)))
def test_invariants_on_random_matrices(f):
    s_all = np.linalg.svd(f, compute_uv=False)
    if s_all[0] < 1e-3 or s_all[1] / s_all[0] < 1e-6:
        return
    res = truncated_svd(f, 2)
    assert np.all(np.diff(res.sigma) <= 1e-12) and np.all(res.sigma >= 0)
    assert np.max(np.abs(res.V.T @ res.V - np.eye(2))) <= 1e-5
    tail = float((s_all[2:] ** 2).sum())
    assert reconstruction_error(f, res) == pytest.approx(tail, rel=1e-4, abs=1e-9 * s_all[0] ** 2)
    pivots = res.V[np.argmax(np.abs(res.V), axis=0), [0, 1]]
    assert np.all(pivots > 0)


def test_negating_input_keeps_vectors(rng):
    f = rng.normal(size=(9, 4))
    np.testing.assert_array_equal(truncated_svd(f, 2).V, truncated_svd(-f, 2).V)


def test_sign_convention_ties_prefer_lowest_index():
    # v = [-1, 1]/sqrt(2) up to sign: both entries tie in magnitude, the first must be positive.
    f = np.array([[1.0, -1.0]])
    res = truncated_svd(f, 1)
    assert res.V[0, 0] > 0
    np.testing.assert_allclose(res.V[:, 0], [2 ** -0.5, -(2 ** -0.5)], atol=1e-12)


def test_jacobi_backends_agree(rng):
    a = rng.normal(size=(3, 7, 7))
    c = a @ np.swapaxes(a, -1, -2)
    lam_np, vec_np = jacobi_eigh(c, backend="numpy")
    ref = np.linalg.eigvalsh(c)[..., ::-1]
    np.testing.assert_allclose(lam_np, ref, rtol=1e-9)
    np.testing.assert_allclose(c @ vec_np, vec_np * lam_np[..., None, :], atol=1e-8)
    try:
        lam_jit, _ = jacobi_eigh(c, backend="compiled")
    except RuntimeError:
        pytest.skip("numba not installed")
    np.testing.assert_allclose(lam_jit, ref, rtol=1e-9)


# -- compress_feature_map ---------------------------------------------------------------------

def test_compress_matches_per_image_oracle(rng):
    x = rng.normal(size=(4, 3, 3, 5))
    out = compress_feature_map(Tensor(x, dtype=np.float64), k=2).vectors.data
    for i in range(4):
        _, v = oracle_vectors(x[i].reshape(9, 5), 2)
        row = np.concatenate([v[:, 0], v[:, 1]])
        np.testing.assert_allclose(out[i], row / np.linalg.norm(row), rtol=1e-5, atol=1e-9)


def test_single_pixel_map_is_normalized_vector(rng):
    x = rng.normal(size=(3, 1, 1, 6))
    out = compress_feature_map(Tensor(x, dtype=np.float64), k=1).vectors.data
    flat = x.reshape(3, 6)
    expected = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    np.testing.assert_allclose(np.abs(out), np.abs(expected), atol=1e-10)
    np.testing.assert_allclose(np.abs((out * expected).sum(axis=1)), 1.0, atol=1e-10)


def test_k1_rows_already_unit_norm(rng):
    x = Tensor(rng.normal(size=(5, 4, 4, 3)))
    raw = _batched_svd(x.data.reshape(5, 16, 3), 1)[1][..., 0]
    np.testing.assert_allclose(np.linalg.norm(raw, axis=1), 1.0, atol=1e-6)
    fv = compress_feature_map(x, 1)
    assert isinstance(fv, FeatureVectorSet) and fv.size == 5 and fv.dim == 3
    np.testing.assert_allclose(np.linalg.norm(fv.vectors.data, axis=1), 1.0, atol=1e-6)


def test_compress_is_deterministic(rng):
    x = Tensor(rng.normal(size=(4, 3, 3, 5)))
    a = compress_feature_map(x, 2).vectors.data
    b = compress_feature_map(x, 2).vectors.data
    assert a.tobytes() == b.tobytes()


def test_degenerate_error_names_batch_index(rng):
    x = rng.normal(size=(3, 2, 2, 4))
    x[1] = np.outer(np.ones(4), rng.normal(size=4)).reshape(2, 2, 4)
    with pytest.raises(DegenerateRankError) as info:
        compress_feature_map(Tensor(x, dtype=np.float64), k=2)
    assert info.value.index == 1 and info.value.k == 2


def test_compress_rejects_non_4d():
    with pytest.raises(DimensionError):
        compress_feature_map(Tensor(np.ones((3, 4))), 1)


# -- backward ----------------------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradient(rng):
    f = rng.normal(size=(1, 6, 4))
    _, _, _, lam, basis = _batched_svd(f, 1)
    np.testing.assert_array_equal(svd_backward(f, basis, lam, np.zeros((1, 4, 1))), 0.0)


def test_near_degenerate_gradient_is_finite_and_clipped(rng):
    q1, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    q2, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    f = (q1[:, :4] * np.array([1.0, 1.0 + 1e-9, 0.5, 0.1])) @ q2.T
    x = Tensor(f.reshape(1, 2, 3, 4) * 1e3, requires_grad=True, dtype=np.float64)
    with precision(np.float64):
        fv = compress_feature_map(x, 2)
        (g,) = backprop(ops.sum(ops.mul(fv.vectors, Tensor(rng.normal(size=(1, 8))))), [x])
    assert np.all(np.isfinite(g))
    assert np.max(np.abs(g)) <= GRAD_CLIP


def test_backward_matches_finite_differences(rng):
    x0 = rng.normal(size=(2, 3, 2, 4))
    w = rng.normal(size=(2, 4))
    with precision(np.float64):
        def f(arr):
            return ops.sum(ops.mul(compress_feature_map(Tensor(arr), 1).vectors, Tensor(w))).item()
        x = Tensor(x0, requires_grad=True)
        (g,) = backprop(ops.sum(ops.mul(compress_feature_map(x, 1).vectors, Tensor(w))), [x])
        num = np.zeros_like(x0)
        for idx in np.ndindex(x0.shape):
            xp, xm = x0.copy(), x0.copy()
            xp[idx] += 1e-5
            xm[idx] -= 1e-5
            num[idx] = (f(xp) - f(xm)) / 2e-5
    assert np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12) < 1e-3


# -- sign alignment ------------------------------------------------------------------------------

def _fvs(a):
    return FeatureVectorSet(Tensor(a, dtype=np.float64))


def test_sign_align_identity_and_flip(rng):
    t = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(sign_align_pair(_fvs(t), _fvs(t)).vectors.data, t)
    np.testing.assert_array_equal(sign_align_pair(_fvs(-t), _fvs(t)).vectors.data, t)


def test_sign_align_zero_dot_leaves_row():
    s, t = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    np.testing.assert_array_equal(sign_align_pair(_fvs(s), _fvs(t)).vectors.data, s)


@given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (5, 4), elements=st.floats(-1, 1)))
def test_sign_aligned_rows_point_towards_teacher(s, t):
    out = sign_align_pair(_fvs(s), _fvs(t)).vectors.data
    assert np.all((out * t).sum(axis=1) >= 0)


def test_sign_align_shape_mismatch():
    with pytest.raises(DimensionError):
        sign_align_pair(_fvs(np.ones((2, 3))), _fvs(np.ones((3, 3))))
