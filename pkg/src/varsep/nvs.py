"""Greedy rank-one separation of parametric fields.

Two construction routes share the representation ``sum_i zeta_i(xi) g_i(x)``.

The sampling route works on a black-box function tabulated on spatial
nodes: each step freezes the residual snapshot at the worst remaining
parameter sample as the next deterministic factor and reads the
stochastic factor off a probe node, so factors at new parameters need
the target only at the probe nodes collected so far.

The Galerkin route works on affinely parametrized elliptic problems:
each deterministic factor solves the residual equation at the chosen
parameter, the stochastic factor follows from a closed-form recursion
on cached bilinear-form scalars, and anchors are picked by a residual
estimator built from Riesz representers of the affine residual pieces.
The representers are orthonormalized offline into a small coefficient
factor, which makes the online dual-norm evaluation a Euclidean norm
of a short vector: errors enter linearly, so the estimator stays
accurate even where the true residual is near zero.

Either representation can be handed to `decouple_zetas`, which replaces
the chained stochastic factors with mutually independent surrogates
(sparse polynomial fits or hierarchical low-rank expansions), after
which evaluation no longer touches the original target or operator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .basis import (
    design_matrix,
    draw_samples,
    families_from_tag,
    total_degree_basis,
    _points_of,
)
from .field import (
    AffineOperator,
    AffineRhs,
    VProduct,
    build_grid,
    expand_free,
    kl_realize,
)
from .sreg import filars, predict
from .tensor import (
    CountingEvaluator,
    derive_seed,
    eval_low_rank,
    group_split,
    hslrta,
    _approx_from_dict,
    _approx_to_dict,
    _basis_from_dict,
    _basis_to_dict,
    _model_from_dict,
    _model_to_dict,
)

FORMAT_NAME = "varsep-separated"
FORMAT_VERSION = 1

# a vector whose orthogonal remainder falls below this times its own
# norm adds no new direction
DEPENDENCE_RTOL = 1e-12


class _OrthoBasis:
    """Incrementally orthonormalized column collection.

    Vectors are reduced against the current directions twice (classical
    Gram-Schmidt with reorthogonalization).  A vector whose remainder is
    negligible contributes only expansion coefficients, never a new
    direction, so coefficient columns stay consistent with the span.
    """

    def __init__(self, n, vmat=None, drop_rtol=DEPENDENCE_RTOL):
        self.n = n
        self.vmat = vmat
        self.drop_rtol = drop_rtol
        self.q = np.zeros((n, 0))
        self.cols = []
        self.dropped = []

    def _apply(self, u):
        return u if self.vmat is None else self.vmat @ u

    def _norm(self, u):
        return math.sqrt(max(float(np.dot(u, self._apply(u))), 0.0))

    def add(self, vec):
        vec = np.asarray(vec, dtype=float).reshape(self.n)
        base = self._norm(vec)
        coeff = np.zeros(self.q.shape[1])
        rem = vec.astype(float, copy=True)
        for _ in range(2):
            if self.q.shape[1] == 0:
                break
            h = self.q.T @ self._apply(rem)
            rem = rem - self.q @ h
            coeff = coeff + h
        rnorm = self._norm(rem)
        idx = len(self.cols)
        if rnorm <= self.drop_rtol * base:
            self.cols.append(coeff)
            self.dropped.append(idx)
        else:
            self.q = np.column_stack([self.q, rem / rnorm])
            self.cols.append(np.concatenate([coeff, [rnorm]]))
        return idx

    @property
    def n_dirs(self):
        return self.q.shape[1]

    def coeff_matrix(self):
        out = np.zeros((self.n_dirs, len(self.cols)))
        for j, c in enumerate(self.cols):
            out[: c.shape[0], j] = c
        return out


@dataclass
class OrthoResult:
    """Orthonormalized factor set with the change-of-basis bookkeeping.

    ``coefs[:, i]`` expands input ``i`` in the returned fields, so a
    separated sum keeps its value when the stochastic factor vector is
    replaced by ``coefs @ zetas``.
    """

    fields: np.ndarray
    coefs: np.ndarray
    dropped: list


def gram_schmidt(vectors, vmat=None, drop_rtol=DEPENDENCE_RTOL):
    """Orthonormalize nodal vectors in the chosen inner product.

    ``vectors`` is an (n, N) column stack; ``vmat`` is a symmetric
    positive matrix defining the inner product (a `VProduct` is also
    accepted), or None for the Euclidean one.  Inputs whose projection
    remainder is below ``drop_rtol`` times their own norm are dropped
    from the direction set and reported in ``dropped``.
    """
    vec = np.asarray(vectors, dtype=float)
    if vec.ndim == 1:
        vec = vec.reshape(-1, 1)
    if vec.ndim != 2:
        raise ValueError("expected an (n, N) column stack of vectors")
    mat = getattr(vmat, "matrix", vmat)
    ob = _OrthoBasis(vec.shape[0], vmat=mat, drop_rtol=drop_rtol)
    for j in range(vec.shape[1]):
        ob.add(vec[:, j])
    return OrthoResult(fields=ob.q, coefs=ob.coeff_matrix(), dropped=list(ob.dropped))


@dataclass
class ZetaSurrogate:
    """Independent replacement for one chained stochastic factor.

    Holds a sparse polynomial expansion (kind "basis") or a low-rank
    tensor expansion (kind "lowrank") plus its validation record; the
    object references no other term, so terms evaluate independently.
    """

    kind: str
    model: object
    basis: object
    validation_error: float
    validation_max: float
    flagged: bool
    evals: int = 0

    def evaluate(self, samples):
        pts = _points_of(samples)
        if self.kind == "basis":
            return predict(self.model, self.basis, pts)
        return np.asarray(eval_low_rank(self.model, pts), dtype=float).reshape(
            pts.shape[0]
        )


@dataclass
class SeparatedFunction:
    """Separated representation of a black-box parametric field.

    ``fields`` columns are residual snapshots frozen at the parameter
    anchors; ``probe_values[j, i]`` tabulates factor ``i`` at the probe
    node of step ``j``, which is all the recursion needs besides fresh
    target values at the probe nodes.
    """

    points: np.ndarray          # (n_nodes, dx)
    fields: np.ndarray          # (n_nodes, N)
    anchors: np.ndarray         # (N, d)
    probe_indices: np.ndarray   # (N,)
    probe_values: np.ndarray    # (N, N)
    residual_history: list      # mean-square residual over remaining samples
    strict: bool
    evaluator: object
    surrogates: list = None

    @property
    def n_terms(self):
        return self.fields.shape[1]

    @property
    def dim(self):
        return self.anchors.shape[1]

    def zeta_values(self, samples):
        """Exact stochastic factors at given parameters, shape (m, N)."""
        pts = _points_of(samples)
        if self.n_terms == 0:
            return np.zeros((pts.shape[0], 0))
        if self.evaluator is None:
            raise ValueError(
                "no evaluator attached; only surrogate evaluation is available"
            )
        probes = self.points[self.probe_indices]
        gmat = np.empty((self.n_terms, pts.shape[0]))
        for j in range(pts.shape[0]):
            gmat[:, j] = np.asarray(
                self.evaluator(probes, pts[j]), dtype=float
            ).reshape(self.n_terms)
        out = np.empty((pts.shape[0], self.n_terms))
        for k in range(self.n_terms):
            z = gmat[k] / self.probe_values[k, k]
            out[:, k] = z
            gmat -= np.outer(self.probe_values[:, k], z)
        return out


def nvs_function(evaluator, points, samples, tol=0.0, max_terms=None, strict=False):
    """Greedy separated approximation of ``evaluator`` on a node set.

    Each step selects the remaining parameter sample with the largest
    residual field norm (mean square by default, sup norm when
    ``strict``), freezes the residual snapshot there as the next
    deterministic factor, and divides the probe-node residual row by
    the factor's value at its largest-magnitude node to obtain the
    stochastic factor.  Stops when the mean-square residual over the
    remaining samples falls below ``tol``, on ``max_terms``, on an
    identically zero residual snapshot, or when samples run out.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    xis = _points_of(samples)
    m = xis.shape[0]
    snap = np.empty((pts.shape[0], m))
    for j in range(m):
        snap[:, j] = np.asarray(evaluator(pts, xis[j]), dtype=float).reshape(
            pts.shape[0]
        )
    if not np.all(np.isfinite(snap)):
        raise ValueError("target returned non-finite values on the candidate set")

    cap = m if max_terms is None else min(int(max_terms), m)
    resid = snap.copy()
    remaining = np.ones(m, dtype=bool)
    fields, anchors, probe_idx = [], [], []
    history = [float(np.mean(resid * resid))]
    for _ in range(cap):
        cols = np.flatnonzero(remaining)
        if cols.size == 0:
            break
        block = resid[:, cols]
        if strict:
            score = np.max(np.abs(block), axis=0)
        else:
            score = np.mean(block * block, axis=0)
        j = int(cols[int(np.argmax(score))])
        g = resid[:, j].copy()
        x = int(np.argmax(np.abs(g)))
        if g[x] == 0.0:
            break  # residual vanished everywhere that matters: converged
        z = resid[x, :] / g[x]
        resid -= np.outer(g, z)
        remaining[j] = False
        fields.append(g)
        anchors.append(xis[j])
        probe_idx.append(x)
        live = resid[:, remaining]
        ms = float(np.mean(live * live)) if live.size else 0.0
        history.append(ms)
        if ms < tol:
            break

    n = len(fields)
    fmat = np.column_stack(fields) if n else np.zeros((pts.shape[0], 0))
    idx = np.array(probe_idx, dtype=int)
    return SeparatedFunction(
        points=pts,
        fields=fmat,
        anchors=np.array(anchors, dtype=float).reshape(n, xis.shape[1]),
        probe_indices=idx,
        probe_values=fmat[idx, :] if n else np.zeros((0, 0)),
        residual_history=history,
        strict=bool(strict),
        evaluator=evaluator,
    )


def _coeff_rows(obj, xis):
    c = np.asarray(obj.coeffs(xis), dtype=float)
    if c.ndim == 1:
        c = c.reshape(1, -1)
    return c


def _next_zeta_column(kcoef, fcoef, rhs_dots, op_dots, zprev, k, xis=None):
    denom = kcoef @ op_dots[:, k, k]
    bad = np.flatnonzero(denom == 0.0)
    if bad.size:
        j = int(bad[0])
        loc = f"sample {j}" if xis is None else str(np.asarray(xis)[j].tolist())
        raise ValueError(
            f"zero separation denominator (non-coercive evaluation point) at xi = {loc}"
        )
    numer = fcoef @ rhs_dots[:, k]
    if k:
        cross = kcoef @ op_dots[:, :k, k]
        numer = numer - np.einsum("mi,mi->m", zprev[:, :k], cross)
    return numer / denom


def zeta_next(xi, previous, scalars, op_coeffs, rhs_coeffs):
    """Closed-form next stochastic factor at one parameter point.

    ``scalars`` is the step's triple (load functionals at the new
    factor, operator pairings with the earlier factors as an
    (m_a, k-1) array, operator pairings of the factor with itself);
    ``op_coeffs`` and ``rhs_coeffs`` map the point to affine weights.
    """
    xi = np.asarray(xi, dtype=float)
    previous = np.asarray(previous, dtype=float).reshape(-1)
    bq, cross, diag = scalars
    kc = np.asarray(op_coeffs(xi), dtype=float).reshape(-1)
    fc = np.asarray(rhs_coeffs(xi), dtype=float).reshape(-1)
    denom = float(kc @ np.asarray(diag, dtype=float))
    if denom == 0.0:
        raise ValueError(
            "zero separation denominator (non-coercive evaluation point) "
            f"at xi = {xi.tolist()}"
        )
    numer = float(fc @ np.asarray(bq, dtype=float))
    if previous.size:
        numer -= float(previous @ (kc @ np.asarray(cross, dtype=float)))
    return numer / denom


class ResidualEstimator:
    """Offline-online evaluator of the dual residual norm.

    The residual of a k-term separated solution is a fixed linear
    combination of Riesz representers with parameter-dependent weights.
    Offline the representers are orthonormalized in the V inner product
    into the coefficient factor ``tfactor``; online the norm is the
    Euclidean norm of ``tfactor`` applied to the weight vector.  The
    Gram matrix of the representers is cached alongside for
    inspection; columns are ordered load representers first, then one
    operator block per term.
    """

    def __init__(self, op, rhs, vprod):
        self.op = op
        self.rhs = rhs
        self.vprod = vprod
        self.n_rhs = len(rhs.vectors)
        self.n_op = len(op.matrices)
        self.n_terms = 0
        self._n = op.matrices[0].shape[0]
        self._basis = _OrthoBasis(self._n, vmat=vprod.matrix)
        self._tfactor = None
        self._repmat = np.zeros((self._n, 0))
        self.gram = np.zeros((0, 0))
        self.l_reps = []
        if self.n_rhs:
            self.c_reps = np.column_stack(
                [vprod.riesz(np.asarray(v, dtype=float)) for v in rhs.vectors]
            )
        else:
            self.c_reps = np.zeros((self._n, 0))
        self._append(self.c_reps)

    @classmethod
    def _restore(cls, op, rhs, tfactor, n_terms):
        est = cls.__new__(cls)
        est.op = op
        est.rhs = rhs
        est.vprod = None
        est.n_rhs = len(rhs.vectors) if rhs.vectors else _coeff_width(rhs)
        est.n_op = len(op.matrices) if op.matrices else _coeff_width(op)
        est.n_terms = int(n_terms)
        est._n = 0
        est._basis = None
        est._tfactor = np.asarray(tfactor, dtype=float)
        est._repmat = None
        est.gram = None
        est.l_reps = None
        est.c_reps = None
        return est

    def _append(self, cols):
        cols = np.asarray(cols, dtype=float).reshape(self._n, -1)
        for j in range(cols.shape[1]):
            self._basis.add(cols[:, j])
        vnew = self.vprod.matrix @ cols
        top = self._repmat.T @ vnew
        dnew = cols.T @ vnew
        dnew = np.triu(dnew) + np.triu(dnew, 1).T
        jold = self.gram.shape[0]
        jn = cols.shape[1]
        g = np.zeros((jold + jn, jold + jn))
        g[:jold, :jold] = self.gram
        g[:jold, jold:] = top
        g[jold:, :jold] = top.T
        g[jold:, jold:] = dnew
        self.gram = g
        self._repmat = np.hstack([self._repmat, cols])

    def extend(self, g_free):
        """Add the operator representers of one deterministic factor."""
        if self._basis is None:
            raise ValueError("estimator was restored online-only; cannot extend")
        g_free = np.asarray(g_free, dtype=float).reshape(self._n)
        cols = np.column_stack(
            [self.vprod.riesz(-(mat @ g_free)) for mat in self.op.matrices]
        )
        self.l_reps.append(cols)
        self._append(cols)
        self.n_terms += 1

    @property
    def tfactor(self):
        if self._basis is not None:
            return self._basis.coeff_matrix()
        return self._tfactor

    def gram_blocks(self):
        """Load-load, load-operator, operator-operator Gram views."""
        if self.gram is None:
            raise ValueError("restored estimator carries no Gram cache")
        nb = self.n_rhs
        return self.gram[:nb, :nb], self.gram[:nb, nb:], self.gram[nb:, nb:]

    def _weights(self, kcoef, fcoef, zetas, n_terms):
        m = kcoef.shape[0]
        if n_terms == 0:
            return fcoef
        z = np.asarray(zetas, dtype=float).reshape(m, -1)[:, :n_terms]
        w = z[:, :, None] * kcoef[:, None, :]
        return np.hstack([fcoef, w.reshape(m, n_terms * self.n_op)])

    def value_many(self, samples, zetas=None, n_terms=None, tfactor=None):
        """Estimator values for a batch of parameters, shape (m,)."""
        pts = _points_of(samples)
        k = self.n_terms if n_terms is None else int(n_terms)
        if k > self.n_terms:
            raise ValueError("estimator holds fewer terms than requested")
        kcoef = _coeff_rows(self.op, pts)
        fcoef = _coeff_rows(self.rhs, pts)
        t = self.tfactor if tfactor is None else tfactor
        cols = self.n_rhs + k * self.n_op
        y = self._weights(kcoef, fcoef, zetas, k) @ t[:, :cols].T
        sq = np.einsum("md,md->m", y, y)
        bad = sq < -1e-12
        if np.any(bad):
            raise ArithmeticError("estimator produced a significantly negative square")
        return np.sqrt(np.maximum(sq, 0.0))


def build_estimator(op, rhs, fields_free, vprod):
    """Residual estimator for the given deterministic factors.

    ``fields_free`` is an (n_free, k) column stack (or a single
    vector); representers satisfy the defining pairings against every
    discrete test vector.
    """
    est = ResidualEstimator(op, rhs, vprod)
    arr = np.asarray(fields_free, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    for j in range(arr.shape[1]):
        est.extend(arr[:, j])
    return est


def estimate_error(estimator, xi, zetas=()):
    """Dual residual norm at one parameter point.

    ``zetas`` are the stochastic factor values at ``xi`` for as many
    terms as should enter; fewer than the estimator holds evaluates a
    truncated representation.
    """
    xi = np.asarray(xi, dtype=float).reshape(1, -1)
    z = np.asarray(zetas, dtype=float).reshape(1, -1)
    k = z.shape[1] if np.size(zetas) else 0
    vals = estimator.value_many(xi, z, n_terms=k)
    return float(vals[0])


@dataclass
class SeparatedSolution:
    """Separated Galerkin solution of an affinely parametrized problem.

    ``rhs_dots[q, k]`` pairs load piece q with factor k; ``op_dots[p,
    i, k]`` pairs operator piece p with factors i and k (symmetric in
    the last two axes).  These caches drive the stochastic-factor
    recursion and make the object self-contained online.
    """

    op: object
    rhs: object
    grid: object
    fields: np.ndarray        # (n_nodes, N)
    anchors: np.ndarray       # (N, d)
    rhs_dots: np.ndarray      # (m_b, N)
    op_dots: np.ndarray       # (m_a, N, N)
    estimator: ResidualEstimator
    residual_history: list
    surrogates: list = None

    @property
    def n_terms(self):
        return self.fields.shape[1]

    @property
    def dim(self):
        return self.anchors.shape[1]

    def fields_free(self):
        return self.fields[self.grid.free]

    def step_scalars(self, k):
        """(load, cross, diagonal) scalar triple of term ``k``."""
        return (
            self.rhs_dots[:, k].copy(),
            self.op_dots[:, :k, k].copy(),
            self.op_dots[:, k, k].copy(),
        )

    def zeta_values(self, samples):
        """Exact stochastic factors at given parameters, shape (m, N)."""
        pts = _points_of(samples)
        if self.n_terms == 0:
            return np.zeros((pts.shape[0], 0))
        kcoef = _coeff_rows(self.op, pts)
        fcoef = _coeff_rows(self.rhs, pts)
        out = np.empty((pts.shape[0], self.n_terms))
        for k in range(self.n_terms):
            out[:, k] = _next_zeta_column(
                kcoef, fcoef, self.rhs_dots, self.op_dots, out, k, xis=pts
            )
        return out


def _solve_at(op, rhs, xi):
    kl = getattr(op, "kl", None)
    if kl is not None:
        knod = kl_realize(kl, xi)
        kmin = float(knod.min())
        if kmin <= 0.0:
            raise ValueError(
                f"coefficient loses positivity (min k = {kmin:.4g}) at xi = {xi.tolist()}"
            )
    amat = op.assemble(xi).tocsc()
    bvec = np.asarray(rhs.assemble(xi), dtype=float)
    try:
        lu = spla.splu(amat)
    except RuntimeError as exc:
        raise ValueError(f"singular operator at xi = {xi.tolist()}") from exc
    return lu.solve(bvec)


def nvs_spde(op, rhs, samples, tol=0.0, max_terms=None, seed=0, vprod=None):
    """Greedy separated solve driven by the residual estimator.

    The first anchor is drawn uniformly from the candidate samples;
    afterwards each step solves the residual problem at the anchor,
    records the bilinear-form scalars of the new factor, extends the
    estimator, and picks the remaining candidate with the largest
    estimated residual.  Stops when that maximum falls below ``tol``,
    on ``max_terms``, or when candidates run out.  ``op`` needs
    reduced ``matrices``, ``coeffs``, ``assemble`` and a ``grid``;
    ``rhs`` needs ``vectors``, ``coeffs`` and ``assemble``.
    """
    xis = _points_of(samples)
    m = xis.shape[0]
    grid = op.grid
    if vprod is None:
        vprod = VProduct(grid)
    est = ResidualEstimator(op, rhs, vprod)
    kcoef = _coeff_rows(op, xis)
    fcoef = _coeff_rows(rhs, xis)
    m_a = len(op.matrices)
    m_b = len(rhs.vectors)
    cap = m if max_terms is None else min(int(max_terms), m)

    vals = est.value_many(xis, n_terms=0)
    history = [{"mean": float(vals.mean()), "max": float(vals.max())}]

    rng = np.random.default_rng(seed)
    remaining = np.ones(m, dtype=bool)
    nxt = int(rng.integers(m))
    free_cols = []
    anchors = []
    rhs_dots = np.zeros((m_b, 0))
    op_dots = np.zeros((m_a, 0, 0))
    zmat = np.zeros((m, 0))
    for k in range(cap):
        xi_k = xis[nxt]
        u_free = _solve_at(op, rhs, xi_k)
        if k:
            g_free = u_free - np.column_stack(free_cols) @ zmat[nxt]
        else:
            g_free = u_free

        grown = np.zeros((m_a, k + 1, k + 1))
        grown[:, :k, :k] = op_dots
        op_dots = grown
        for p in range(m_a):
            w = op.matrices[p] @ g_free
            for i in range(k):
                pair = float(free_cols[i] @ w)
                op_dots[p, i, k] = pair
                op_dots[p, k, i] = pair
            op_dots[p, k, k] = float(g_free @ w)
        rhs_dots = np.hstack(
            [rhs_dots, np.array([[float(v @ g_free)] for v in rhs.vectors])]
        )

        zcol = _next_zeta_column(kcoef, fcoef, rhs_dots, op_dots, zmat, k, xis=xis)
        zmat = np.column_stack([zmat, zcol])
        free_cols.append(g_free)
        anchors.append(xi_k)
        est.extend(g_free)
        remaining[nxt] = False

        vals = est.value_many(xis, zmat, tfactor=est.tfactor)
        cols = np.flatnonzero(remaining)
        if cols.size == 0:
            history.append({"mean": 0.0, "max": 0.0})
            break
        live = vals[cols]
        history.append({"mean": float(live.mean()), "max": float(live.max())})
        if history[-1]["max"] < tol:
            break
        nxt = int(cols[int(np.argmax(live))])

    n = len(free_cols)
    fields = np.column_stack([expand_free(grid, g) for g in free_cols])
    return SeparatedSolution(
        op=op,
        rhs=rhs,
        grid=grid,
        fields=fields,
        anchors=np.array(anchors, dtype=float).reshape(n, xis.shape[1]),
        rhs_dots=rhs_dots,
        op_dots=op_dots,
        estimator=est,
        residual_history=history,
    )


def decouple_zetas(
    solution,
    samples,
    method="filars",
    *,
    family=None,
    degree=None,
    groups=None,
    group_degrees=None,
    ranks=None,
    fiber_counts=40,
    seed=0,
    budget=None,
    tol=0.0,
    lambda_stop=None,
    validation=None,
    threshold=None,
):
    """Fit mutually independent surrogates for the stochastic factors.

    ``method`` "filars" fits one sparse expansion per factor over a
    total-degree basis (``family`` tag and ``degree`` required) on the
    given training samples; "hslrta" fits one hierarchical low-rank
    expansion per factor (``family``, ``groups``, ``group_degrees``
    and ``ranks`` required), drawing its own structured evaluations.
    Training targets always come from the exact factor recursion.
    Validation errors are measured on ``validation`` samples (fresh
    draws when omitted); a term whose rms error exceeds ``threshold``
    is flagged, not rejected.
    """
    method = str(method).lower()
    if method not in ("filars", "hslrta"):
        raise ValueError(f"unknown decoupling method {method!r}")
    n = solution.n_terms
    dim = solution.dim

    surrogates = []
    if method == "filars":
        if family is None or degree is None:
            raise ValueError("filars decoupling needs a family tag and a degree")
        fams = families_from_tag(family, dim)
        basis = total_degree_basis(fams, dim, int(degree))
        pts = _points_of(samples)
        targets = solution.zeta_values(pts)
        phi = design_matrix(basis, pts)
        for i in range(n):
            model = filars(phi, targets[:, i], lambda_stop=lambda_stop)
            surrogates.append(
                ZetaSurrogate(
                    kind="basis",
                    model=model,
                    basis=basis,
                    validation_error=0.0,
                    validation_max=0.0,
                    flagged=False,
                    evals=pts.shape[0],
                )
            )
        val_families = fams
    else:
        if family is None or groups is None or group_degrees is None or ranks is None:
            raise ValueError(
                "hslrta decoupling needs a family tag, groups, group degrees and ranks"
            )
        if sum(int(g) for g in groups) != dim:
            raise ValueError("group sizes must add up to the parameter dimension")
        split = group_split(family, groups, group_degrees)
        for i in range(n):
            def target(pts, _i=i):
                return solution.zeta_values(pts)[:, _i]

            counter = CountingEvaluator(target)
            approx = hslrta(
                counter,
                split,
                ranks,
                fiber_counts,
                seed=derive_seed(seed, 91, i),
                tol=tol,
                lambda_stop=lambda_stop,
                budget=budget,
            )
            surrogates.append(
                ZetaSurrogate(
                    kind="lowrank",
                    model=approx,
                    basis=None,
                    validation_error=0.0,
                    validation_max=0.0,
                    flagged=False,
                    evals=counter.calls,
                )
            )
        val_families = split.families

    if validation is None:
        val_pts = draw_samples(val_families, 500, derive_seed(seed, 17)).matrix
    else:
        val_pts = _points_of(validation)
    exact = solution.zeta_values(val_pts)
    for i, surr in enumerate(surrogates):
        diff = surr.evaluate(val_pts) - exact[:, i]
        surr.validation_error = float(np.sqrt(np.mean(diff * diff)))
        surr.validation_max = float(np.max(np.abs(diff))) if diff.size else 0.0
        surr.flagged = threshold is not None and surr.validation_error > threshold
    return surrogates


def eval_separated(obj, xi, use_surrogates=False):
    """Nodal field of a separated representation at parameter point(s).

    A single parameter vector yields one nodal field; a batch yields a
    (n_nodes, m) column stack.  ``use_surrogates`` switches the
    stochastic factors from the exact recursion to the fitted
    independent surrogates.
    """
    single = not hasattr(xi, "matrix") and np.asarray(xi).ndim == 1
    pts = _points_of(xi)
    if obj.n_terms == 0:
        out = np.zeros((obj.fields.shape[0], pts.shape[0]))
    else:
        if use_surrogates:
            if not obj.surrogates:
                raise ValueError("no surrogates attached to the representation")
            z = np.column_stack([s.evaluate(pts) for s in obj.surrogates])
        else:
            z = obj.zeta_values(pts)
        out = obj.fields @ z.T
    return out[:, 0] if single else out


@dataclass
class _CoeffShim:
    """Coefficient-only stand-in for an operator or load after loading.

    Carries no matrices or vectors, so it supports factor recursion and
    estimator evaluation but not new solves or estimator extension.
    """

    kind: str
    width: int
    matrices: tuple = ()
    vectors: tuple = ()

    def coeffs(self, xi):
        xi = np.asarray(xi, dtype=float)
        one = xi.ndim == 1
        pts = xi.reshape(1, -1) if one else xi
        if self.kind == "one-then-xi":
            out = np.hstack([np.ones((pts.shape[0], 1)), pts])
        elif self.kind == "sin-first-last":
            out = np.sin(pts[:, 0] * pts[:, -1])[:, None]
        else:
            raise ValueError(f"unknown coefficient family {self.kind!r}")
        return out[0] if one else out


def _coeff_width(obj):
    return obj.width


def _coeff_kind(obj):
    if isinstance(obj, AffineOperator):
        return "one-then-xi"
    if isinstance(obj, AffineRhs):
        return "sin-first-last"
    if isinstance(obj, _CoeffShim):
        return obj.kind
    raise TypeError(
        "only the built-in affine families serialize; custom ones need their own format"
    )


def _surrogate_to_dict(surr):
    out = {
        "kind": surr.kind,
        "validation_error": surr.validation_error,
        "validation_max": surr.validation_max,
        "flagged": bool(surr.flagged),
        "evals": int(surr.evals),
    }
    if surr.kind == "basis":
        out["model"] = _model_to_dict(surr.model)
        out["basis"] = _basis_to_dict(surr.basis)
    else:
        out["model"] = _approx_to_dict(surr.model)
    return out


def _surrogate_from_dict(data):
    kind = data["kind"]
    if kind == "basis":
        model = _model_from_dict(data["model"])
        basis = _basis_from_dict(data["basis"])
    else:
        model = _approx_from_dict(data["model"])
        basis = None
    return ZetaSurrogate(
        kind=kind,
        model=model,
        basis=basis,
        validation_error=float(data["validation_error"]),
        validation_max=float(data["validation_max"]),
        flagged=bool(data["flagged"]),
        evals=int(data.get("evals", 0)),
    )


def save_solution(obj, path):
    """Write a separated representation as a versioned JSON file.

    Captures everything the online phase needs: factor fields, anchor
    log, cached scalars, the estimator coefficient factor, and any
    surrogates.  The black-box evaluator of a sampling-route result is
    not serializable; reloading such a file supports surrogate
    evaluation only unless an evaluator is re-attached.
    """
    data = {"format": FORMAT_NAME, "version": FORMAT_VERSION}
    if isinstance(obj, SeparatedFunction):
        data["kind"] = "function"
        data["points"] = obj.points.tolist()
        data["fields"] = obj.fields.tolist()
        data["anchors"] = obj.anchors.tolist()
        data["probe_indices"] = obj.probe_indices.tolist()
        data["probe_values"] = obj.probe_values.tolist()
        data["residual_history"] = [float(v) for v in obj.residual_history]
        data["strict"] = bool(obj.strict)
    elif isinstance(obj, SeparatedSolution):
        data["kind"] = "spde"
        data["grid"] = {"nx": int(obj.grid.nx), "ny": int(obj.grid.ny)}
        data["op_coeffs"] = _coeff_kind(obj.op)
        data["rhs_coeffs"] = _coeff_kind(obj.rhs)
        data["n_op"] = int(obj.estimator.n_op)
        data["n_rhs"] = int(obj.estimator.n_rhs)
        data["fields"] = obj.fields.tolist()
        data["anchors"] = obj.anchors.tolist()
        data["rhs_dots"] = obj.rhs_dots.tolist()
        data["op_dots"] = obj.op_dots.tolist()
        data["tfactor"] = obj.estimator.tfactor.tolist()
        data["residual_history"] = obj.residual_history
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    if obj.surrogates:
        data["surrogates"] = [_surrogate_to_dict(s) for s in obj.surrogates]
    with open(path, "w") as fh:
        json.dump(data, fh)


def load_solution(path, op=None, rhs=None, evaluator=None):
    """Load a separated representation written by `save_solution`.

    For the Galerkin kind, passing the rebuilt ``op`` and ``rhs``
    restores full capability; otherwise coefficient-only stand-ins are
    attached, which is enough for factor recursion, estimator values
    and surrogate evaluation.
    """
    with open(path) as fh:
        data = json.load(fh)
    if data.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} file")
    if data.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported {FORMAT_NAME} version {data.get('version')!r}")
    surrogates = None
    if "surrogates" in data:
        surrogates = [_surrogate_from_dict(d) for d in data["surrogates"]]

    if data["kind"] == "function":
        n = len(data["probe_indices"])
        return SeparatedFunction(
            points=np.asarray(data["points"], dtype=float),
            fields=np.asarray(data["fields"], dtype=float),
            anchors=np.asarray(data["anchors"], dtype=float),
            probe_indices=np.asarray(data["probe_indices"], dtype=int),
            probe_values=np.asarray(data["probe_values"], dtype=float).reshape(n, n),
            residual_history=[float(v) for v in data["residual_history"]],
            strict=bool(data["strict"]),
            evaluator=evaluator,
            surrogates=surrogates,
        )
    if data["kind"] != "spde":
        raise ValueError(f"unknown representation kind {data['kind']!r}")

    anchors = np.asarray(data["anchors"], dtype=float)
    if op is None:
        op = _CoeffShim(kind=data["op_coeffs"], width=int(data["n_op"]))
    if rhs is None:
        rhs = _CoeffShim(kind=data["rhs_coeffs"], width=int(data["n_rhs"]))
    est = ResidualEstimator._restore(
        op, rhs, np.asarray(data["tfactor"], dtype=float), anchors.shape[0]
    )
    grid = build_grid(int(data["grid"]["nx"]), int(data["grid"]["ny"]))
    return SeparatedSolution(
        op=op,
        rhs=rhs,
        grid=grid,
        fields=np.asarray(data["fields"], dtype=float),
        anchors=anchors,
        rhs_dots=np.asarray(data["rhs_dots"], dtype=float),
        op_dots=np.asarray(data["op_dots"], dtype=float),
        estimator=est,
        residual_history=data["residual_history"],
        surrogates=surrogates,
    )
