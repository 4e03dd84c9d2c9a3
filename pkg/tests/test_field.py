import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from varsep.field import (
    KLExpansion,
    VProduct,
    affine_operator_from_kl,
    assemble_kl,
    assemble_rhs,
    build_grid,
    expand_free,
    field_to_csv,
    kl_realize,
    load_vector,
    mass_matrix,
    solve_deterministic,
    stiffness_matrix,
)


def poisson_solve(grid, f):
    # unit-coefficient reference solve used by the manufactured-solution test
    amat = stiffness_matrix(grid, np.ones(grid.n_nodes))
    bvec = load_vector(grid, f)
    free = grid.free
    sol = spla.spsolve(amat[free][:, free].tocsc(), bvec[free])
    return expand_free(grid, sol)


def l2_error(grid, values, exact):
    err = values - exact(grid.coords)
    m = mass_matrix(grid)
    return math.sqrt(err @ (m @ err))


def test_build_grid_counts():
    g = build_grid(2, 2)
    assert g.n_nodes == 9
    assert int(g.dirichlet.sum()) == 3
    big = build_grid(100, 100)
    assert big.n_nodes == 101 * 101
    assert int(big.dirichlet.sum()) == 101


def test_dirichlet_mask_is_top_edge_only():
    g = build_grid(4, 3)
    on = g.coords[g.dirichlet]
    off = g.coords[~g.dirichlet]
    np.testing.assert_array_equal(on[:, 1], 1.0)
    assert np.all(off[:, 1] < 1.0)


def test_build_grid_rejects_tiny():
    with pytest.raises(ValueError):
        build_grid(1, 5)


def test_stiffness_symmetric_and_positive_definite():
    g = build_grid(5, 4)
    a = stiffness_matrix(g, np.full(g.n_nodes, 2.0))
    asym = (a - a.T).toarray()
    assert np.max(np.abs(asym)) < 1e-14
    afree = a[g.free][:, g.free].toarray()
    evals = np.linalg.eigvalsh(afree)
    assert evals.min() > 0.0


def test_manufactured_solution_second_order():
    # u*(x,y) = cos(pi x)(1 - y^2) satisfies the natural conditions on the
    # side and bottom edges and vanishes on the top edge
    exact = lambda pts: np.cos(np.pi * pts[:, 0]) * (1.0 - pts[:, 1] ** 2)
    f = lambda pts: np.cos(np.pi * pts[:, 0]) * (np.pi**2 * (1.0 - pts[:, 1] ** 2) + 2.0)
    errors = []
    for n in (8, 16, 32):
        g = build_grid(n, n)
        u = poisson_solve(g, f)
        errors.append(l2_error(g, u, exact))
    assert 3.5 < errors[0] / errors[1] < 4.5
    assert 3.5 < errors[1] / errors[2] < 4.5


def test_zero_load_zero_solution():
    g = build_grid(6, 6)
    u = poisson_solve(g, lambda pts: np.zeros(pts.shape[0]))
    np.testing.assert_allclose(u, 0.0, atol=1e-14)


def test_mirror_symmetry_in_x():
    # coefficient and load symmetric under x -> 1 - x; the top-edge
    # Dirichlet strip is invariant under that reflection
    g = build_grid(8, 8)
    coeff = 1.0 + g.coords[:, 0] * (1.0 - g.coords[:, 0]) + g.coords[:, 1]
    amat = stiffness_matrix(g, coeff)
    bvec = load_vector(g, lambda pts: np.sin(np.pi * pts[:, 0]) + pts[:, 1])
    free = g.free
    u = expand_free(g, spla.spsolve(amat[free][:, free].tocsc(), bvec[free]))
    mirror = np.zeros(g.n_nodes, dtype=int)
    for node in range(g.n_nodes):
        i = node % (g.nx + 1)
        j = node // (g.nx + 1)
        mirror[node] = j * (g.nx + 1) + (g.nx - i)
    np.testing.assert_allclose(u, u[mirror], atol=1e-10)


def test_kl_zero_variance():
    g = build_grid(6, 6)
    with pytest.warns(UserWarning, match="zero variance"):
        kl = assemble_kl(0.0, 0.5, 0.5, g, 4)
    assert kl.d == 0
    np.testing.assert_array_equal(kl_realize(kl, np.zeros(0)), kl.mean)


def test_kl_trace_bound_and_order():
    g = build_grid(20, 20)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 32)
    assert kl.d == 32
    assert np.all(np.diff(kl.eigenvalues) <= 1e-12)
    assert np.all(kl.eigenvalues > 0.0)
    assert kl.eigenvalues.sum() <= 3.0 + 1e-10


def test_kl_modes_discrete_orthonormal():
    g = build_grid(15, 15)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 10)
    gram = kl.modes.T @ (kl.weights[:, None] * kl.modes)
    np.testing.assert_allclose(gram, np.eye(10), atol=1e-8)


def test_kl_monte_carlo_covariance():
    g = build_grid(12, 12)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 32)
    rng = np.random.default_rng(0)
    xi = rng.uniform(-1.0, 1.0, (10000, 32))
    fields = kl_realize(kl, xi)  # (n_nodes, 10000)
    # pairs close enough that the 32-mode truncation resolves the kernel
    pairs = [(0, 0), (5, 5), (20, 21), (40, 53), (30, 33)]
    for a, b in pairs:
        xa, ya = g.coords[a]
        xb, yb = g.coords[b]
        want = 3.0 * math.exp(-((xa - xb) ** 2) / 0.5 - ((ya - yb) ** 2) / 0.5)
        got = np.mean((fields[a] - fields[a].mean()) * (fields[b] - fields[b].mean()))
        assert abs(got - want) <= 0.1 * abs(want)


def test_affine_reconstruction_matches_direct_assembly():
    g = build_grid(10, 10)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 8)
    op = affine_operator_from_kl(kl, g)
    rng = np.random.default_rng(1)
    for _ in range(20):
        xi = rng.uniform(-1.0, 1.0, 8)
        direct = stiffness_matrix(g, kl_realize(kl, xi))
        assembled = op.assemble(xi, reduced=False)
        diff = (assembled - direct).toarray()
        assert np.max(np.abs(diff)) < 1e-10


def test_affine_matrices_symmetric_and_mean_pd():
    g = build_grid(8, 8)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 6)
    op = affine_operator_from_kl(kl, g)
    for m in op.matrices:
        assert np.max(np.abs((m - m.T).toarray())) < 1e-14
    evals = np.linalg.eigvalsh(op.matrices[0].toarray())
    assert evals.min() > 0.0


def test_operator_at_zero_is_mean_stiffness():
    g = build_grid(7, 7)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 5)
    op = affine_operator_from_kl(kl, g)
    direct = stiffness_matrix(g, np.full(g.n_nodes, kl.mean))
    diff = (op.assemble(np.zeros(5), reduced=False) - direct).toarray()
    assert np.max(np.abs(diff)) < 1e-12


def test_rhs_dirichlet_rows_zero():
    g = build_grid(9, 9)
    rhs = assemble_rhs(g, dim=32)
    np.testing.assert_array_equal(rhs.vectors_full[0][g.dirichlet], 0.0)
    assert rhs.coeffs(np.ones(32))[0] == pytest.approx(math.sin(1.0))


def test_solve_deterministic_and_reproducibility():
    g = build_grid(10, 10)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 8)
    op = affine_operator_from_kl(kl, g)
    rhs = assemble_rhs(g, dim=8)
    xi = np.linspace(-0.9, 0.9, 8)
    u1 = solve_deterministic(op, rhs, xi)
    u2 = solve_deterministic(op, rhs, xi)
    np.testing.assert_array_equal(u1, u2)
    np.testing.assert_array_equal(u1[g.dirichlet], 0.0)
    assert np.max(np.abs(u1)) > 0.0


def test_solve_non_coercive_names_the_point():
    g = build_grid(6, 6)
    kl = assemble_kl(3.0, 0.5, 0.5, g, 4)
    op = affine_operator_from_kl(kl, g)
    rhs = assemble_rhs(g, dim=4)
    # eigenvector sign is arbitrary: push against the mode's dominant sign
    direction = -math.copysign(1000.0, kl.modes[:, 0].sum())
    bad = np.array([direction, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="1000"):
        solve_deterministic(op, rhs, bad)


def test_riesz_pairing():
    g = build_grid(8, 8)
    v = VProduct(g)
    n = g.free.size
    rng = np.random.default_rng(2)
    func = rng.standard_normal(n)
    rep = v.riesz(func)
    for _ in range(20):
        test_vec = rng.standard_normal(n)
        lhs = v.inner(rep, test_vec)
        rhs = float(func @ test_vec)
        assert lhs == pytest.approx(rhs, rel=1e-10)
    np.testing.assert_allclose(v.riesz(np.zeros(n)), 0.0, atol=1e-15)


def test_riesz_norm_is_dual_norm():
    g = build_grid(2, 2)  # 6 free nodes: dense oracle is exact
    v = VProduct(g)
    dense = v.matrix.toarray()
    rng = np.random.default_rng(3)
    func = rng.standard_normal(6)
    want = math.sqrt(func @ np.linalg.solve(dense, func))
    assert v.norm(v.riesz(func)) == pytest.approx(want, rel=1e-12)
    # the supremum of F.d / |d|_V is attained at d = V^{-1} F; random
    # directions must stay below it
    best = np.linalg.solve(dense, func)
    attained = abs(func @ best) / math.sqrt(best @ dense @ best)
    assert attained == pytest.approx(want, rel=1e-12)
    for _ in range(200):
        d = rng.standard_normal(6)
        assert abs(func @ d) / math.sqrt(d @ dense @ d) <= want * (1.0 + 1e-9)


def test_field_csv_export(tmp_path):
    g = build_grid(3, 3)
    values = np.arange(g.n_nodes, dtype=float)
    path = tmp_path / "field.csv"
    field_to_csv(g, values, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y,value"
    assert len(lines) == g.n_nodes + 1
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_allclose(back[:, 2], values)
    np.testing.assert_allclose(back[:, :2], g.coords)
