"""Spatial discretization and random-field inputs for the elliptic model.

The domain is the unit square with a homogeneous Dirichlet condition on
the top edge ``y = 1`` and natural conditions elsewhere, discretized by
bilinear quadrilaterals on a uniform grid.  The diffusion coefficient
is a truncated Karhunen-Loeve expansion of a squared-exponential
random field, which makes the stiffness operator affine in the random
vector: one matrix for the mean coefficient plus one per retained mode.
A Riesz solver for the discrete H1 inner product turns residual
functionals into fields whose norms drive error estimation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_GAUSS = 1.0 / math.sqrt(3.0)
_QPOINTS = ((-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS))


@dataclass(frozen=True)
class Grid:
    """Uniform bilinear-element mesh on (0,1) x (0,1).

    Nodes are numbered row by row, ``j * (nx + 1) + i`` for the node at
    ``(i * hx, j * hy)``.  The Dirichlet mask marks the full y = 1 row.
    """

    nx: int
    ny: int
    coords: np.ndarray        # (n_nodes, 2)
    dirichlet: np.ndarray     # (n_nodes,) bool
    free: np.ndarray          # indices of non-Dirichlet nodes
    elem_nodes: np.ndarray    # (n_elems, 4) corner indices, counterclockwise

    @property
    def n_nodes(self):
        return self.coords.shape[0]

    @property
    def hx(self):
        return 1.0 / self.nx

    @property
    def hy(self):
        return 1.0 / self.ny


def build_grid(nx, ny):
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2 cells per axis")
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    xg, yg = np.meshgrid(xs, ys)  # row-major over y
    coords = np.column_stack([xg.ravel(), yg.ravel()])
    dirichlet = np.isclose(coords[:, 1], 1.0)
    free = np.flatnonzero(~dirichlet)

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (jj * (nx + 1) + ii).ravel()
    elem_nodes = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    return Grid(nx=nx, ny=ny, coords=coords, dirichlet=dirichlet, free=free,
                elem_nodes=elem_nodes)


def _shape_tables(grid):
    # shape values and physical gradients at the 2x2 Gauss points
    vals = []
    grads = []
    for xi, eta in _QPOINTS:
        s = 0.25 * np.array(
            [
                (1 - xi) * (1 - eta),
                (1 + xi) * (1 - eta),
                (1 + xi) * (1 + eta),
                (1 - xi) * (1 + eta),
            ]
        )
        dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
        deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
        g = np.column_stack([dxi * 2.0 / grid.hx, deta * 2.0 / grid.hy])
        vals.append(s)
        grads.append(g)
    return vals, grads


def stiffness_matrix(grid, nodal_coeff):
    """Assemble ``int c(x) grad(u) . grad(v)``, c interpolated bilinearly."""
    nodal_coeff = np.asarray(nodal_coeff, dtype=float)
    corner = nodal_coeff[grid.elem_nodes]  # (n_e, 4)
    detj = grid.hx * grid.hy / 4.0
    vals, grads = _shape_tables(grid)
    n_e = grid.elem_nodes.shape[0]
    ke = np.zeros((n_e, 4, 4))
    for s, g in zip(vals, grads):
        cg = corner @ s  # coefficient at this Gauss point per element
        ke += cg[:, None, None] * (g @ g.T)[None, :, :] * detj
    rows = np.repeat(grid.elem_nodes, 4, axis=1).ravel()
    cols = np.tile(grid.elem_nodes, (1, 4)).ravel()
    mat = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))
    return mat.tocsr()


def mass_matrix(grid):
    """Assemble ``int u v`` with unit coefficient."""
    detj = grid.hx * grid.hy / 4.0
    vals, _ = _shape_tables(grid)
    me = sum(np.outer(s, s) for s in vals) * detj
    n_e = grid.elem_nodes.shape[0]
    data = np.tile(me.ravel(), n_e)
    rows = np.repeat(grid.elem_nodes, 4, axis=1).ravel()
    cols = np.tile(grid.elem_nodes, (1, 4)).ravel()
    mat = sp.coo_matrix((data, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))
    return mat.tocsr()


def load_vector(grid, f):
    """Assemble ``int f v`` for a callable ``f`` of (n, 2) point arrays."""
    detj = grid.hx * grid.hy / 4.0
    vals, _ = _shape_tables(grid)
    out = np.zeros(grid.n_nodes)
    corners = grid.coords[grid.elem_nodes]  # (n_e, 4, 2)
    for s in vals:
        pts = np.einsum("a,eaj->ej", s, corners)
        fv = np.asarray(f(pts), dtype=float) * detj
        for a in range(4):
            np.add.at(out, grid.elem_nodes[:, a], fv * s[a])
    return out


@dataclass
class KLExpansion:
    """Truncated expansion of the random diffusion coefficient.

    ``modes`` are orthonormal in the trapezoidal discrete L2 inner
    product; ``amplitudes`` already fold in the variance of the
    uniform-on-[-1,1] coordinates, so realizations reproduce the target
    covariance kernel and each matrix of the affine operator is the
    stiffness of one amplitude-scaled mode.
    """

    mean: float
    eigenvalues: np.ndarray   # (d,) nonincreasing, positive
    modes: np.ndarray         # (n_nodes, d)
    weights: np.ndarray       # (n_nodes,) quadrature weights used

    @property
    def d(self):
        return self.eigenvalues.shape[0]

    @property
    def amplitudes(self):
        # uniform [-1,1] variables have variance 1/3
        return np.sqrt(3.0 * self.eigenvalues)


def _trapezoid_weights(grid):
    wx = np.full(grid.nx + 1, grid.hx)
    wx[[0, -1]] = grid.hx / 2.0
    wy = np.full(grid.ny + 1, grid.hy)
    wy[[0, -1]] = grid.hy / 2.0
    return (wy[:, None] * wx[None, :]).ravel()


def assemble_kl(variance, length_x, length_y, grid, d, mean=8.0):
    """Top-d covariance eigenpairs on the grid nodes.

    Nystrom discretization with trapezoidal weights and a dense
    symmetric eigensolve; non-positive trailing eigenvalues shrink the
    truncation with a warning.
    """
    n = grid.n_nodes
    if d > n:
        raise ValueError("cannot keep more modes than grid nodes")
    if d < 0:
        raise ValueError("d must be >= 0")
    w = _trapezoid_weights(grid)
    if variance == 0.0 or d == 0:
        if d > 0:
            warnings.warn("zero variance: dropping all modes, field equals its mean")
        return KLExpansion(mean=mean, eigenvalues=np.zeros(0),
                           modes=np.zeros((n, 0)), weights=w)

    x = grid.coords[:, 0]
    y = grid.coords[:, 1]
    cov = variance * np.exp(
        -((x[:, None] - x[None, :]) ** 2) / (2.0 * length_x**2)
        - ((y[:, None] - y[None, :]) ** 2) / (2.0 * length_y**2)
    )
    sq = np.sqrt(w)
    sym = cov * sq[:, None] * sq[None, :]
    evals, evecs = scipy.linalg.eigh(sym, subset_by_index=[n - d, n - 1])
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    keep = evals > 0.0
    if not np.all(keep):
        warnings.warn(
            f"dropping {int((~keep).sum())} non-positive covariance eigenvalues"
        )
        evals = evals[keep]
        evecs = evecs[:, keep]
    modes = evecs / sq[:, None]
    return KLExpansion(mean=mean, eigenvalues=evals, modes=modes, weights=w)


def kl_realize(kl, xi):
    """Nodal coefficient field for one parameter vector (or a batch)."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 1:
        return kl.mean + kl.modes @ (kl.amplitudes * xi)
    return kl.mean + kl.modes @ (kl.amplitudes[:, None] * xi.T)


@dataclass
class AffineOperator:
    """Stiffness operator as a sum ``sum_p k_p(xi) A_p``.

    ``matrices[0]`` is the mean-coefficient stiffness with coefficient
    weight 1; matrix ``p >= 1`` is the stiffness of mode ``p`` and its
    weight is the coordinate ``xi_p`` itself.  Full-size and
    free-node-reduced copies are kept: reduced ones drive solves, full
    ones serve direct-assembly checks and exports.
    """

    grid: Grid
    kl: KLExpansion
    matrices_full: list
    matrices: list

    @property
    def n_terms(self):
        return len(self.matrices)

    def coeffs(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            return np.concatenate([[1.0], xi])
        return np.hstack([np.ones((xi.shape[0], 1)), xi])

    def assemble(self, xi, reduced=True):
        mats = self.matrices if reduced else self.matrices_full
        c = self.coeffs(xi)
        out = c[0] * mats[0]
        for p in range(1, len(mats)):
            out = out + c[p] * mats[p]
        return out


@dataclass
class AffineRhs:
    """Load functional as ``sum_q f_q(xi) b_q``; here a single term."""

    grid: Grid
    vectors_full: list
    vectors: list
    dim: int

    @property
    def n_terms(self):
        return len(self.vectors)

    def coeffs(self, xi):
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            return np.array([math.sin(xi[0] * xi[-1])])
        return np.sin(xi[:, 0] * xi[:, -1])[:, None]

    def assemble(self, xi, reduced=True):
        vecs = self.vectors if reduced else self.vectors_full
        c = self.coeffs(xi)
        out = c[0] * vecs[0]
        for q in range(1, len(vecs)):
            out = out + c[q] * vecs[q]
        return out


def affine_operator_from_kl(kl, grid):
    ones = np.ones(grid.n_nodes)
    mats = [stiffness_matrix(grid, kl.mean * ones)]
    for p in range(kl.d):
        mats.append(stiffness_matrix(grid, kl.amplitudes[p] * kl.modes[:, p]))
    free = grid.free
    reduced = [m[free][:, free].tocsr() for m in mats]
    return AffineOperator(grid=grid, kl=kl, matrices_full=mats, matrices=reduced)


def assemble_rhs(grid, dim):
    """Load vectors of the model source ``2 exp(x1 + x2 + 3) sin(xi_1 xi_d)``."""
    full = load_vector(grid, lambda pts: 2.0 * np.exp(pts[:, 0] + pts[:, 1] + 3.0))
    full = full.copy()
    full[grid.dirichlet] = 0.0
    return AffineRhs(grid=grid, vectors_full=[full], vectors=[full[grid.free]], dim=dim)


def solve_deterministic(op, rhs, xi):
    """Galerkin solve at one parameter point; returns the full nodal field."""
    xi = np.asarray(xi, dtype=float)
    knod = kl_realize(op.kl, xi)
    kmin = float(knod.min())
    if kmin <= 0.0:
        raise ValueError(
            f"coefficient loses positivity (min k = {kmin:.4g}) at xi = {xi.tolist()}"
        )
    amat = op.assemble(xi).tocsc()
    bvec = rhs.assemble(xi)
    sol_free = spla.spsolve(amat, bvec)
    return expand_free(op.grid, sol_free)


def expand_free(grid, values_free):
    out = np.zeros(grid.n_nodes)
    out[grid.free] = values_free
    return out


class VProduct:
    """Discrete H1 inner product on the free nodes, with a Riesz solver."""

    def __init__(self, grid):
        ones = np.ones(grid.n_nodes)
        vfull = mass_matrix(grid) + stiffness_matrix(grid, ones)
        free = grid.free
        self.grid = grid
        self.matrix = vfull[free][:, free].tocsc()
        self._lu = spla.splu(self.matrix)

    def riesz(self, functional):
        """Free-node field R with (R, v)_V = functional . v for all v."""
        functional = np.asarray(functional, dtype=float)
        if functional.ndim == 1:
            return self._lu.solve(functional)
        return self._lu.solve(functional)

    def inner(self, u, v):
        return float(np.dot(u, self.matrix @ v))

    def norm(self, u):
        return math.sqrt(max(self.inner(u, u), 0.0))


def field_to_csv(grid, values, path):
    """Write a full nodal field as ``x,y,value`` rows."""
    values = np.asarray(values, dtype=float).reshape(grid.n_nodes)
    table = np.column_stack([grid.coords, values])
    np.savetxt(path, table, delimiter=",", header="x,y,value", comments="")
