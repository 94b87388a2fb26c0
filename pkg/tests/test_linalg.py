import numpy as np
import pytest

from metainfluence import linalg
from metainfluence.linalg import (
    FactorMatrix,
    IllConditionedError,
    NotPositiveSemidefiniteError,
    eigh_symmetric,
    orthogonalize_keep_largest,
    psd_sqrt_small,
    pseudo_inverse_from_factor,
    pseudo_inverse_spectral,
    symmetrize,
)


def random_symmetric(rng, n, scale=1.0):
    a = rng.normal(0, scale, size=(n, n))
    return symmetrize(a)


def test_eigh_identity():
    e = eigh_symmetric(np.eye(3))
    np.testing.assert_allclose(e.eigenvalues, np.ones(3))
    np.testing.assert_allclose(e.eigenvectors.T @ e.eigenvectors, np.eye(3), atol=1e-12)


def test_eigh_diagonal_signed_order():
    e = eigh_symmetric(np.diag([2.0, -1.0]))
    np.testing.assert_allclose(e.eigenvalues, [2.0, -1.0])
    # axis-aligned eigenvectors up to sign
    np.testing.assert_allclose(np.abs(e.eigenvectors), np.eye(2), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_eigh_reconstruction_and_orthonormality(seed):
    rng = np.random.default_rng(seed)
    a = random_symmetric(rng, 8)
    e = eigh_symmetric(a)
    recon = e.reconstruct()
    assert np.linalg.norm(recon - a) <= 1e-8 * max(1.0, np.linalg.norm(a))
    assert np.linalg.norm(e.eigenvectors.T @ e.eigenvectors - np.eye(8)) <= 1e-10 * 8
    assert np.all(np.diff(e.eigenvalues) <= 1e-12)


def test_eigh_rejects_nonfinite_and_asymmetric():
    with pytest.raises(ValueError):
        eigh_symmetric(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        eigh_symmetric(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_pseudo_inverse_rank1_diagonal():
    e = eigh_symmetric(np.diag([2.0, 0.0]))
    np.testing.assert_allclose(pseudo_inverse_spectral(e, 1), np.diag([0.5, 0.0]))


def test_pseudo_inverse_drops_negative_when_excluded():
    e = eigh_symmetric(np.diag([4.0, 1.0, -3.0]))
    np.testing.assert_allclose(pseudo_inverse_spectral(e, 2), np.diag([0.25, 1.0, 0.0]))


def test_pseudo_inverse_keeps_retained_negative():
    e = eigh_symmetric(np.diag([4.0, -2.0]))
    np.testing.assert_allclose(pseudo_inverse_spectral(e, "all"), np.diag([0.25, -0.5]))


def test_pseudo_inverse_positive_rule():
    e = eigh_symmetric(np.diag([4.0, 1.0, 0.0, -3.0]))
    np.testing.assert_allclose(
        pseudo_inverse_spectral(e, "positive"), np.diag([0.25, 1.0, 0.0, 0.0])
    )


def test_pseudo_inverse_threshold_rule():
    e = eigh_symmetric(np.diag([8.0, 1.0, 0.5]))
    # tau = 0.1 -> retain |lam| >= 0.8
    np.testing.assert_allclose(
        pseudo_inverse_spectral(e, 0.1), np.diag([0.125, 1.0, 0.0])
    )


def test_pseudo_inverse_ill_conditioned_error():
    e = eigh_symmetric(np.diag([1.0, 1e-15]))
    with pytest.raises(IllConditionedError):
        pseudo_inverse_spectral(e, 2)


def test_moore_penrose_on_psd_rank4():
    rng = np.random.default_rng(7)
    b = rng.normal(size=(6, 4))
    a = symmetrize(b @ b.T)  # PSD rank 4
    e = eigh_symmetric(a)
    pinv = pseudo_inverse_spectral(e, 4)
    np.testing.assert_allclose(a @ pinv @ a, a, atol=1e-8 * np.linalg.norm(a))
    np.testing.assert_allclose(pinv @ a @ pinv, pinv, atol=1e-8 * np.linalg.norm(pinv))
    np.testing.assert_allclose(a @ pinv, (a @ pinv).T, atol=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_moore_penrose_mixed_spectrum(seed):
    """H pinv H = H_pruned and projector idempotence on mixed-sign spectra."""
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(4, 12))
    a = random_symmetric(rng, n)
    e = eigh_symmetric(a)
    k = int(rng.integers(1, n + 1))
    idx = linalg.retained_indices(e.eigenvalues, k)
    scale = np.abs(e.eigenvalues).max()
    if np.abs(e.eigenvalues[idx]).min() < 1e-10 * scale:
        pytest.skip("random spectrum too close to singular for this draw")
    pinv = pseudo_inverse_spectral(e, k)
    pruned = e.reconstruct(idx)
    tol = 1e-8 * max(1.0, np.linalg.norm(a))
    np.testing.assert_allclose(pruned @ pinv @ pruned, pruned, atol=tol)
    np.testing.assert_allclose(pinv @ pruned @ pinv, pinv, atol=tol)
    proj = pinv @ pruned
    np.testing.assert_allclose(proj @ proj, proj, atol=1e-8)
    np.testing.assert_allclose(proj, proj.T, atol=1e-10)


def test_psd_sqrt_scalar_and_zero():
    np.testing.assert_allclose(psd_sqrt_small(np.array([[4.0]])), [[2.0]])
    np.testing.assert_allclose(psd_sqrt_small(np.zeros((3, 3))), np.zeros((3, 3)))


def test_psd_sqrt_softmax_curvature():
    s = np.array([0.5, 0.5])
    a = np.diag(s) - np.outer(s, s)
    c = psd_sqrt_small(a)
    np.testing.assert_allclose(c @ c.T, a, atol=1e-9)
    assert np.linalg.matrix_rank(c, tol=1e-10) == 1


def test_psd_sqrt_rejects_negative():
    with pytest.raises(NotPositiveSemidefiniteError):
        psd_sqrt_small(np.diag([1.0, -1e-6]))


def test_orthogonalize_axis_pair():
    f = FactorMatrix(np.array([[1.0, 0.0], [0.0, 2.0]]))
    out = orthogonalize_keep_largest(f, capacity=2)
    assert out.ncols == 2
    g = out.columns.T @ out.columns
    assert abs(g[0, 1]) <= 1e-8 * np.sqrt(g[0, 0] * g[1, 1])
    np.testing.assert_allclose(out.gram_sum(), f.gram_sum(), atol=1e-12)


def test_orthogonalize_drops_duplicate():
    f = FactorMatrix(np.array([[1.0, 1.0], [0.0, 0.0]]))
    out = orthogonalize_keep_largest(f, capacity=2)
    assert out.ncols == 1
    np.testing.assert_allclose(out.gram_sum(), f.gram_sum(), atol=1e-12)


def test_orthogonalize_empty_input():
    out = orthogonalize_keep_largest(FactorMatrix.empty(5), capacity=3)
    assert out.ncols == 0 and out.rows == 5


def test_orthogonalize_capacity_compression_near_optimal():
    rng = np.random.default_rng(3)
    cols = FactorMatrix(rng.normal(size=(10, 20)))
    out = orthogonalize_keep_largest(cols, capacity=6)
    assert out.ncols == 6
    # pairwise orthogonality
    g = out.columns.T @ out.columns
    norms = np.sqrt(np.diag(g))
    off = g - np.diag(np.diag(g))
    assert np.abs(off).max() <= 1e-8 * np.outer(norms, norms).max()
    # captured mass within factor 2 of the optimal rank-6 truncation
    full = eigh_symmetric(cols.gram_sum())
    best = full.reconstruct(np.arange(6))
    err_best = np.linalg.norm(cols.gram_sum() - best)
    err_ours = np.linalg.norm(cols.gram_sum() - out.gram_sum())
    assert err_ours <= 2.0 * err_best + 1e-12
    # span containment: each output column reconstructs from the input columns
    proj, *_ = np.linalg.lstsq(cols.columns, out.columns, rcond=None)
    np.testing.assert_allclose(cols.columns @ proj, out.columns, atol=1e-8)


@pytest.mark.parametrize("seed", range(4))
def test_orthogonalize_full_capacity_preserves_sum(seed):
    rng = np.random.default_rng(50 + seed)
    cols = FactorMatrix(rng.normal(size=(9, 14)))
    out = orthogonalize_keep_largest(cols, capacity=14)
    np.testing.assert_allclose(
        out.gram_sum(), cols.gram_sum(), atol=1e-10 * np.linalg.norm(cols.gram_sum())
    )


def test_factor_pinv_single_column():
    f = FactorMatrix(np.array([[2.0], [0.0]]))
    np.testing.assert_allclose(f.gram_sum(), np.diag([4.0, 0.0]))
    np.testing.assert_allclose(pseudo_inverse_from_factor(f), np.diag([0.25, 0.0]), atol=1e-12)


def test_factor_pinv_duplicate_columns():
    u = np.array([1.0, 2.0, -1.0])
    f = FactorMatrix(np.stack([u, u], axis=1))
    expected = np.outer(u, u) / (2.0 * np.linalg.norm(u) ** 4)
    np.testing.assert_allclose(pseudo_inverse_from_factor(f), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_factor_pinv_matches_spectral(seed):
    rng = np.random.default_rng(200 + seed)
    q = int(rng.integers(6, 17))
    r = int(rng.integers(1, 9))
    f = FactorMatrix(rng.normal(size=(q, r)))
    via_factor = pseudo_inverse_from_factor(f)
    e = eigh_symmetric(f.gram_sum())
    rank = int(np.sum(e.eigenvalues > 1e-10 * e.eigenvalues[0]))
    via_spectral = pseudo_inverse_spectral(e, rank)
    scale = np.linalg.norm(via_spectral)
    np.testing.assert_allclose(via_factor, via_spectral, atol=1e-7 * scale)


def test_retained_indices_count_clamps():
    idx = linalg.retained_indices(np.array([3.0, 1.0]), 5)
    np.testing.assert_array_equal(idx, [0, 1])


def test_retained_indices_rejects_bool():
    with pytest.raises(TypeError):
        linalg.retained_indices(np.array([1.0]), True)
