import itertools
import math

import numpy as np
import pytest

from varsep.basis import PolyFamily, draw_samples, total_degree_basis, design_matrix
from varsep.sreg import (
    PathCompleteError,
    RankDeficientError,
    SparseModel,
    filars,
    ilars,
    loo_errors,
    next_lambda,
    ols,
    omp,
    predict,
)


def cd_lasso(phi, z, lam, iters=20000, tol=1e-13):
    """Coordinate-descent oracle for min 0.5||z - phi v||^2 + lam ||v||_1."""
    m, n = phi.shape
    v = np.zeros(n)
    colsq = (phi**2).sum(axis=0)
    resid = z.copy()
    for _ in range(iters):
        delta = 0.0
        for j in range(n):
            old = v[j]
            rho = phi[:, j] @ resid + colsq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / colsq[j]
            if new != old:
                resid += phi[:, j] * (old - new)
                delta = max(delta, abs(new - old))
            v[j] = new
        if delta < tol:
            break
    return v


def brute_force_loo(phi_s, z):
    """Refit-per-left-out-sample oracle for the leave-one-out error."""
    m = len(z)
    sig = np.std(z)
    total = 0.0
    for q in range(m):
        keep = np.arange(m) != q
        w = np.linalg.lstsq(phi_s[keep], z[keep], rcond=None)[0]
        total += ((z[q] - phi_s[q] @ w) / sig) ** 2
    return total / m


def test_ols_identity():
    np.testing.assert_allclose(ols(np.eye(3), np.array([1.0, -2.0, 5.0])), [1.0, -2.0, 5.0])


def test_ols_single_column_mean():
    assert ols(np.array([[1.0], [1.0]]), np.array([2.0, 4.0]))[0] == pytest.approx(3.0)


def test_ols_recovers_random_coefficients():
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((50, 10))
    v = rng.standard_normal(10)
    np.testing.assert_allclose(ols(phi, phi @ v), v, atol=1e-10)


def test_ols_rank_deficient_raises():
    phi = np.ones((4, 2))  # duplicate columns
    with pytest.raises(RankDeficientError):
        ols(phi, np.arange(4.0))


def test_next_lambda_initial():
    rng = np.random.default_rng(1)
    phi = rng.standard_normal((20, 6))
    z = rng.standard_normal(20)
    lam, _ = next_lambda(phi, z)
    assert lam == pytest.approx(np.max(np.abs(phi.T @ z)))


def test_next_lambda_identity_example():
    lam, j = next_lambda(np.eye(2), np.array([3.0, 1.0]))
    assert lam == pytest.approx(3.0)
    assert j == 0


def test_next_lambda_orthogonal_residual_is_zero():
    phi = np.array([[1.0], [0.0]])
    z = np.array([0.0, 2.0])  # orthogonal to the single column
    lam, _ = next_lambda(phi, z)
    assert lam == pytest.approx(0.0, abs=1e-14)


def test_next_lambda_full_support_raises():
    with pytest.raises(PathCompleteError):
        next_lambda(np.eye(2), np.ones(2), support=(0, 1))


def test_ilars_single_active_column():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    z = q[:, 5].copy()
    path = ilars(q, z)
    assert len(path.entries) == 1
    assert path.entries[0].model.support.tolist() == [5]
    assert path.debiased.support.tolist() == [5]
    assert path.debiased.coeffs[5] == pytest.approx(1.0, abs=1e-12)


def test_ilars_stop_at_lambda_max_gives_empty_model():
    rng = np.random.default_rng(4)
    phi = rng.standard_normal((10, 4))
    z = rng.standard_normal(10)
    lam_max = np.max(np.abs(phi.T @ z))
    path = ilars(phi, z, lambda_stop=lam_max)
    assert len(path.entries) == 0
    assert path.debiased.nnz == 0
    np.testing.assert_array_equal(path.debiased.coeffs, 0.0)


def test_ilars_orthonormal_matches_soft_threshold():
    # with an orthonormal design the lasso solution is soft thresholding and
    # the closed-form lambda schedule is exact, so every path point has an
    # independent oracle (closed form, cross-checked by coordinate descent)
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.standard_normal((20, 20)))
    v_true = np.zeros(20)
    v_true[[3, 11, 17]] = [2.0, -1.2, 0.6]
    z = q @ v_true
    path = ilars(q, z)
    corr = q.T @ z
    for entry in path.entries:
        oracle = np.sign(corr) * np.maximum(np.abs(corr) - entry.lam, 0.0)
        np.testing.assert_allclose(entry.model.coeffs, oracle, atol=1e-10)
    for entry in path.entries[:3]:
        np.testing.assert_allclose(
            entry.model.coeffs, cd_lasso(q, z, entry.lam), atol=1e-8
        )
    assert sorted(path.debiased.support.tolist()) == [3, 11, 17]
    np.testing.assert_allclose(path.debiased.coeffs, v_true, atol=1e-8)


def test_ilars_general_matrix_noiseless_debias_is_exact():
    # the path may pick up spurious atoms on a correlated design, but the
    # debiased terminal model of a noiseless sparse target must reproduce the
    # true coefficients exactly (least squares on any full-rank superset of
    # the true support puts zeros on the extras)
    rng = np.random.default_rng(6)
    phi = rng.standard_normal((30, 12))
    v_true = np.zeros(12)
    v_true[[2, 7]] = [1.5, -0.8]
    z = phi @ v_true
    path = ilars(phi, z)
    assert {2, 7} <= set(path.debiased.support.tolist())
    np.testing.assert_allclose(path.debiased.coeffs, v_true, atol=1e-8)


def test_ilars_lambda_monotone_and_subgradient():
    rng = np.random.default_rng(7)
    for trial in range(20):
        phi = rng.standard_normal((40, 25))
        z = rng.standard_normal(40)
        path = ilars(phi, z)
        lams = path.lambdas
        assert np.all(np.diff(lams) <= 1e-12)
        for entry in path.entries:
            resid_corr = phi.T @ (z - phi @ entry.model.coeffs)
            on = entry.model.support
            scale = max(entry.lam, 1.0)
            assert np.max(np.abs(np.abs(resid_corr[on]) - entry.lam)) <= 1e-8 * scale
            off = np.setdiff1d(np.arange(25), on)
            assert np.max(np.abs(resid_corr[off]), initial=0.0) <= entry.lam + 1e-8 * scale


def test_ilars_sign_consistency():
    rng = np.random.default_rng(8)
    phi = rng.standard_normal((50, 30))
    z = rng.standard_normal(50)
    path = ilars(phi, z)
    for entry in path.entries:
        prods = entry.model.coeffs[entry.model.support] * entry.signs
        assert np.all(prods >= -1e-10)


def test_ilars_duplicate_column_flags_degenerate():
    rng = np.random.default_rng(9)
    base = rng.standard_normal((20, 5))
    phi = np.hstack([base, base[:, :1]])  # column 5 duplicates column 0
    z = base @ np.array([1.0, 0.5, 0.0, 0.0, 0.0])
    path = ilars(phi, z)
    assert path.degenerate
    assert not (0 in path.debiased.support and 5 in path.debiased.support)
    np.testing.assert_allclose(phi @ path.debiased.coeffs, z, atol=1e-8)


def test_ilars_zero_column_raises():
    phi = np.zeros((4, 2))
    phi[:, 0] = 1.0
    with pytest.raises(ValueError, match="zero columns"):
        ilars(phi, np.ones(4))


def test_omp_single_step_on_orthonormal():
    rng = np.random.default_rng(10)
    q, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    z = 3.0 * q[:, 4]
    model = omp(q, z, max_terms=1)
    assert model.support.tolist() == [4]
    assert model.coeffs[4] == pytest.approx(3.0)


def test_omp_zero_terms():
    model = omp(np.eye(3), np.ones(3), max_terms=0)
    assert model.nnz == 0
    np.testing.assert_array_equal(model.coeffs, 0.0)


def test_omp_exact_support_matches_best_subset():
    rng = np.random.default_rng(11)
    phi = rng.standard_normal((100, 200))
    true_support = [17, 60, 151]
    v = np.zeros(200)
    v[true_support] = [2.0, -1.5, 1.0]
    z = phi @ v
    model = omp(phi, z, max_terms=3)
    assert sorted(model.support.tolist()) == true_support
    np.testing.assert_allclose(model.coeffs, v, atol=1e-10)

    # brute-force best-subset oracle at k = 3 (batched normal equations)
    gram = phi.T @ phi
    proj = phi.T @ z
    znorm2 = z @ z
    best_combo, best_resid = None, np.inf
    combos = np.array(list(itertools.combinations(range(200), 3)))
    for chunk in np.array_split(combos, 40):
        g = gram[chunk[:, :, None], chunk[:, None, :]]
        b = proj[chunk]
        w = np.linalg.solve(g, b[..., None])[..., 0]
        resid = znorm2 - np.einsum("ij,ij->i", w, b)
        t = int(np.argmin(resid))
        if resid[t] < best_resid:
            best_resid, best_combo = resid[t], chunk[t]
    assert sorted(best_combo.tolist()) == sorted(model.support.tolist())


def test_loo_perfect_fit_is_zero():
    rng = np.random.default_rng(12)
    phi = rng.standard_normal((30, 3))
    v = np.array([1.0, 2.0, -1.0])
    z = phi @ v
    path = ilars(phi, z)
    report = loo_errors(phi, z, path)
    assert np.min(report.errors) <= 1e-16


def test_loo_hand_example():
    # phi_S = [[1], [1]], z = (0, 2): leverages 0.5, debiased fit 1,
    # population sigma(z) = 1, so eps = ((2)^2 + (2)^2) / 2 = 4
    phi = np.array([[1.0], [1.0]])
    z = np.array([0.0, 2.0])
    path = ilars(phi, z, lambda_stop=0.5)
    report = loo_errors(phi, z, path)
    np.testing.assert_allclose(report.leverages[-1], [0.5, 0.5])
    assert report.errors[-1] == pytest.approx(4.0)


def test_loo_matches_brute_force():
    rng = np.random.default_rng(13)
    phi = rng.standard_normal((40, 100))
    v = np.zeros(100)
    v[[5, 40, 77]] = [1.0, 0.5, -2.0]
    z = phi @ v + 0.05 * rng.standard_normal(40)
    path = ilars(phi, z, max_terms=12)
    report = loo_errors(phi, z, path)
    for t, entry in enumerate(path.entries):
        if not np.isfinite(report.errors[t]):
            continue
        want = brute_force_loo(phi[:, entry.model.support], z)
        assert report.errors[t] == pytest.approx(want, rel=1e-8)


def test_loo_interpolating_support_non_evaluable():
    rng = np.random.default_rng(14)
    phi = rng.standard_normal((4, 8))
    z = rng.standard_normal(4)
    path = ilars(phi, z, lambda_stop=1e-300)
    report = loo_errors(phi, z, path)
    full = [t for t, e in enumerate(path.entries) if e.model.nnz >= 4]
    for t in full:
        assert not np.isfinite(report.errors[t])


def test_loo_constant_observations_raise():
    phi = np.ones((5, 1))
    path = ilars(phi, np.ones(5) * 2.0, lambda_stop=1.0)
    with pytest.raises(ValueError, match="standard deviation"):
        loo_errors(phi, np.ones(5) * 2.0, path)


def test_filars_recovers_noiseless_sparse_model():
    # orthonormal design: atoms enter in true-correlation order, so the exact
    # support appears on the path and leave-one-out selects it
    rng = np.random.default_rng(15)
    q, _ = np.linalg.qr(rng.standard_normal((40, 40)))
    v = np.zeros(40)
    v[[3, 19, 28]] = [2.0, -1.0, 0.5]
    z = q @ v
    model = filars(q, z)
    assert sorted(model.support.tolist()) == [3, 19, 28]
    np.testing.assert_allclose(model.coeffs, v, atol=1e-8)


def test_filars_general_matrix_coefficients_exact():
    rng = np.random.default_rng(45)
    phi = rng.standard_normal((60, 40))
    v = np.zeros(40)
    v[[3, 19, 28]] = [2.0, -1.0, 0.5]
    z = phi @ v
    model = filars(phi, z)
    assert {3, 19, 28} <= set(model.support.tolist())
    np.testing.assert_allclose(model.coeffs, v, atol=1e-8)


def test_filars_single_entry_path_returns_it():
    rng = np.random.default_rng(16)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    z = q[:, 2].copy()
    model, path, report = filars(q, z, return_details=True)
    assert len(path.entries) == 1
    assert model.support.tolist() == [2]


def test_filars_constant_observations():
    basis = total_degree_basis(PolyFamily.LEGENDRE_UNIFORM, 2, 3)
    samples = draw_samples(basis.families, 50, seed=17)
    phi = design_matrix(basis, samples)
    z = np.full(50, 7.5)
    model = filars(phi, z)
    np.testing.assert_allclose(predict(model, basis, samples), z, atol=1e-10)


def test_predict_zero_model():
    basis = total_degree_basis(PolyFamily.LEGENDRE_UNIFORM, 2, 2)
    model = SparseModel(np.zeros(basis.size), np.array([], dtype=int), 0.0)
    out = predict(model, basis, np.zeros((5, 2)))
    np.testing.assert_array_equal(out, 0.0)


def test_predict_matches_dense_evaluation():
    basis = total_degree_basis(PolyFamily.HERMITE_GAUSSIAN, 3, 4)
    samples = draw_samples(basis.families, 40, seed=18)
    phi = design_matrix(basis, samples)
    rng = np.random.default_rng(19)
    coeffs = np.zeros(basis.size)
    sup = rng.choice(basis.size, 6, replace=False)
    coeffs[sup] = rng.standard_normal(6)
    model = SparseModel(coeffs, sup, 0.0)
    np.testing.assert_allclose(predict(model, basis, samples), phi @ coeffs, atol=1e-14)


def test_path_determinism():
    rng = np.random.default_rng(20)
    phi = rng.standard_normal((30, 50))
    z = rng.standard_normal(30)
    p1 = ilars(phi, z)
    p2 = ilars(phi, z)
    assert len(p1.entries) == len(p2.entries)
    for a, b in zip(p1.entries, p2.entries):
        assert a.lam == b.lam
        assert np.array_equal(a.model.coeffs, b.model.coeffs)
