"""Sparse regression engines on top of orthonormal-basis design matrices.

The lasso path solver advances its regularization parameter in closed
form: given the current iterate, the next lambda is the largest
off-support correlation of the residual, which is the smallest value
keeping the sub-gradient condition feasible while the on-support signs
stay fixed.  Every recorded path point is solved to sub-gradient
optimality at its lambda.  A fast leave-one-out sweep over the path
(one hat-matrix diagonal per support, no refits) then picks the final
debiased model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from varsep.basis import SampleSet, design_columns

DROP_TOL = 1e-12
LEVERAGE_GUARD = 1e-10


class RankDeficientError(ValueError):
    """Normal equations are numerically singular."""


class PathCompleteError(RuntimeError):
    """Every column is already on the support; no next lambda exists."""


@dataclass
class SparseModel:
    """Sparse coefficient vector with its support and producing lambda."""

    coeffs: np.ndarray
    support: np.ndarray
    lam: float

    @property
    def nnz(self):
        return len(self.support)


@dataclass
class PathEntry:
    lam: float
    model: SparseModel
    signs: np.ndarray  # aligned with model.support


@dataclass
class SparsePath:
    """Lasso path: shrunk iterates plus the final debiased re-fit."""

    entries: list
    debiased: SparseModel
    degenerate: bool = False

    @property
    def lambdas(self):
        return np.array([e.lam for e in self.entries])


@dataclass
class LooReport:
    """Fast leave-one-out scores for every path entry."""

    debiased: list
    leverages: list
    errors: np.ndarray
    best: int
    all_non_evaluable: bool = False


def _as_problem(phi, z):
    phi = np.asarray(phi, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    if phi.ndim != 2:
        raise ValueError("design matrix must be two-dimensional")
    if phi.shape[0] != z.shape[0]:
        raise ValueError("design matrix and observations disagree on sample count")
    return phi, z


def _solve_spd(gram, rhs):
    # raises scipy.linalg.LinAlgError on numerically singular systems
    factor = scipy.linalg.cho_factor(gram, check_finite=False)
    pivots = np.diag(factor[0]) ** 2
    if pivots.min() < 1e-12 * pivots.max():
        raise scipy.linalg.LinAlgError("pivot ratio below threshold")
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def ols(phi, z):
    """Least-squares coefficients through the normal equations.

    Raises :class:`RankDeficientError` when the smallest pivot of the
    normal-equation factorization falls below 1e-12 times the largest.
    """
    phi, z = _as_problem(phi, z)
    gram = phi.T @ phi
    try:
        return _solve_spd(gram, phi.T @ z)
    except scipy.linalg.LinAlgError as exc:
        raise RankDeficientError(f"normal equations are rank deficient: {exc}") from exc


def next_lambda(phi, z, coeffs=None, support=()):
    """Smallest feasible lambda for the current iterate, plus entering index.

    Returns ``(lam, j)`` where ``lam`` is the largest off-support
    residual correlation and ``j`` attains it (lowest index on ties).
    """
    phi, z = _as_problem(phi, z)
    v = np.zeros(phi.shape[1]) if coeffs is None else np.asarray(coeffs, dtype=float)
    corr = phi.T @ (z - phi @ v)
    mask = np.ones(phi.shape[1], dtype=bool)
    mask[np.asarray(list(support), dtype=int)] = False
    if not mask.any():
        raise PathCompleteError("support already covers every column")
    mag = np.where(mask, np.abs(corr), -np.inf)
    j = int(np.argmax(mag))
    return float(mag[j]), j


class _DependentColumn(Exception):
    """Candidate column is numerically dependent on the active set."""


def ilars(phi, z, lambda_stop=None, max_terms=None):
    """Lasso path with the closed-form lambda schedule.

    Starting from the zero solution at ``lam = max |phi^T z|``, each
    step computes the next lambda as the largest off-support residual
    correlation at the current solution, then continues the piecewise
    linear lasso path down to it, entering and dropping columns exactly
    where their optimality conditions change.  Every recorded path
    point is therefore a lasso solution at its lambda: on-support
    correlations match lambda in magnitude, no off-support correlation
    exceeds it, and coefficient signs agree with the working sign
    vector.  When the schedule stalls because an off-support column is
    pinned at the current lambda (ties, duplicates), that column is
    entered directly with a zero coefficient.  The path stops once
    lambda falls to ``lambda_stop`` (default ``1e-6 * max |phi^T z|``)
    or the support reaches ``max_terms``; the terminal support is then
    re-fit by plain least squares.

    Columns that make the support gram matrix singular are excluded
    from further consideration and flag the path as degenerate.
    """
    phi, z = _as_problem(phi, z)
    m, n = phi.shape
    colsq = (phi**2).sum(axis=0)
    if np.any(colsq == 0.0):
        raise ValueError("design matrix has zero columns: %s" % np.flatnonzero(colsq == 0.0))

    corr = phi.T @ z
    lam_max = float(np.max(np.abs(corr))) if n else 0.0
    lam0 = float(lambda_stop) if lambda_stop is not None else 1e-6 * lam_max
    full = min(m, n)
    cap = full if max_terms is None else min(full, int(max_terms))
    scale = max(lam_max, 1.0)
    edge_tol = 1e-14 * scale  # events must sit strictly below the current lambda
    stall_tol = 1e-12 * scale

    support: list[int] = []
    signs: list[float] = []
    w = np.zeros(0)  # coefficients aligned with support
    rhs = np.zeros(0)  # phi_S^T z aligned with support
    cinv = np.zeros((0, 0))  # inverse of phi_S^T phi_S, rank-one updated
    xbuf = np.empty((m, full))  # active columns, in support order
    excluded = np.zeros(n, dtype=bool)
    entries: list[PathEntry] = []
    degenerate = False
    lam = lam_max
    dirty = 0  # rank-one updates since the last exact refresh
    last_freed = (-1, -1.0)  # newest dropped column and its lambda

    def _add(j, sgn):
        nonlocal cinv, w, rhs, dirty
        k = len(support)
        col = phi[:, j]
        if k:
            g = xbuf[:, :k].T @ col
            cg = cinv @ g
            gamma = colsq[j] - g @ cg
        else:
            cg = np.zeros(0)
            gamma = colsq[j]
        if gamma <= 1e-12 * colsq[j]:
            raise _DependentColumn
        new = np.empty((k + 1, k + 1))
        new[:k, :k] = cinv + np.outer(cg, cg) / gamma
        new[:k, k] = -cg / gamma
        new[k, :k] = -cg / gamma
        new[k, k] = 1.0 / gamma
        cinv = new
        xbuf[:, k] = col
        support.append(int(j))
        signs.append(float(sgn))
        w = np.append(w, 0.0)
        rhs = np.append(rhs, col @ z)
        dirty += 1

    def _drop(t):
        nonlocal cinv, w, rhs, dirty
        k = len(support)
        keep = [i for i in range(k) if i != t]
        ct = cinv[keep, t]
        cinv = cinv[np.ix_(keep, keep)] - np.outer(ct, ct) / cinv[t, t]
        xbuf[:, t : k - 1] = xbuf[:, t + 1 : k]
        del support[t], signs[t]
        w = np.delete(w, t)
        rhs = np.delete(rhs, t)
        dirty += 1

    def _refresh():
        # exact rebuild of the inverse and the correlation vector, so
        # rank-one update drift cannot accumulate along long paths
        nonlocal cinv, w, corr, dirty
        k = len(support)
        if k:
            gram = xbuf[:, :k].T @ xbuf[:, :k]
            try:
                factor = scipy.linalg.cho_factor(gram, check_finite=False)
                cinv = scipy.linalg.cho_solve(factor, np.eye(k), check_finite=False)
            except scipy.linalg.LinAlgError:
                pass  # keep the updated inverse; the path stays usable
            # a coefficient pinned at exact zero (a column that entered at
            # this very lambda) must stay exact, or solver noise turns into
            # a phantom sign crossing
            pinned = w == 0.0
            w = cinv @ (rhs - lam * np.asarray(signs))
            w[pinned] = 0.0
            corr = phi.T @ (z - xbuf[:, :k] @ w)
        else:
            corr = phi.T @ z
        dirty = 0

    def _descend(target):
        # follow the piecewise linear solution from lam downward, stopping
        # at the first support change (so the caller can record it) or at
        # target when no event lies above it; returns the lambda actually
        # reached, or None when the event sequence fails to settle
        nonlocal w, corr, degenerate, last_freed
        pos = lam
        for _ in range(4 * n + 16):
            eligible = ~excluded
            if support:
                eligible[support] = False
            # a column already at or beyond the boundary re-enters on the
            # spot; this also recovers crossings the root scan below can
            # lose to rounding, which would otherwise ride above lambda
            over = np.where(eligible, np.abs(corr), -np.inf) - pos
            j_over = int(np.argmax(over)) if n else 0
            if n and over[j_over] > stall_tol:
                if len(support) >= full:
                    return pos
                sgn_over = 1.0 if corr[j_over] >= 0 else -1.0
                try:
                    _add(j_over, sgn_over)
                except _DependentColumn:
                    excluded[j_over] = True
                    degenerate = True
                    continue
                corr[j_over] = sgn_over * pos
                return pos
            k = len(support)
            if k:
                d = cinv @ np.asarray(signs)
                b = phi.T @ (xbuf[:, :k] @ d)
            else:
                d = np.zeros(0)
                b = np.zeros(n)
            base = corr - pos * b
            with np.errstate(divide="ignore", invalid="ignore"):
                lam_plus = np.where(np.abs(1.0 - b) > 1e-12, base / (1.0 - b), -np.inf)
                lam_minus = np.where(np.abs(1.0 + b) > 1e-12, -base / (1.0 + b), -np.inf)
            for cand in (lam_plus, lam_minus):
                cand[~eligible] = -np.inf
                cand[(cand > pos - edge_tol) | (cand < target)] = -np.inf
            j_plus = int(np.argmax(lam_plus)) if n else 0
            j_minus = int(np.argmax(lam_minus)) if n else 0
            best_entry = -np.inf
            entry_j, entry_sign = -1, 1.0
            if n and lam_plus[j_plus] >= lam_minus[j_minus]:
                best_entry, entry_j, entry_sign = lam_plus[j_plus], j_plus, 1.0
            elif n:
                best_entry, entry_j, entry_sign = lam_minus[j_minus], j_minus, -1.0
            best_drop = -np.inf
            drop_t = -1
            if k:
                # a coefficient sitting at exact zero with the direction
                # pushing against its sign must leave right here, or it
                # would cross zero without ever producing a drop root
                sgn_arr = np.asarray(signs)
                opposing = (w * d < 0.0) | ((w == 0.0) & (sgn_arr * d < 0.0))
                with np.errstate(divide="ignore", invalid="ignore"):
                    lam_drop = np.where(opposing, pos + w / d, -np.inf)
                lam_drop[lam_drop < target] = -np.inf
                drop_t = int(np.argmax(lam_drop))
                best_drop = lam_drop[drop_t]
            if best_drop == -np.inf and best_entry == -np.inf:
                w = w + (pos - target) * d
                corr = corr - (pos - target) * b
                return target
            if best_drop >= best_entry:
                step = pos - best_drop
                w = w + step * d
                corr = corr - step * b
                pos = best_drop
                freed, freed_sign = support[drop_t], signs[drop_t]
                _drop(drop_t)
                # the freed coordinate sits exactly on the boundary; pin
                # its correlation there so drift cannot re-trigger events
                corr[freed] = freed_sign * pos
                last_freed = (freed, pos)
                return pos
            if len(support) >= full:
                # no room for the entering column; stop the descent at
                # the event so the recorded point stays feasible
                step = pos - best_entry
                w = w + step * d
                corr = corr - step * b
                return best_entry
            step = pos - best_entry
            w = w + step * d
            corr = corr - step * b
            pos = best_entry
            try:
                _add(entry_j, entry_sign)
            except _DependentColumn:
                excluded[entry_j] = True
                degenerate = True
                continue
            corr[entry_j] = entry_sign * pos
            return pos
        warnings.warn("lasso path failed to settle; truncating")
        return None

    guard = 100 * max(cap, 10) + 10000
    while guard:
        # schedule steps that change nothing are coalesced, so one record
        # is written per support change rather than per lambda decrement
        changed = False
        while guard:
            guard -= 1
            eligible = ~excluded
            if support:
                eligible[support] = False
            if not eligible.any():
                break
            lam_next = min(lam, float(np.max(np.abs(corr[eligible]))))
            if lam_next <= lam0:
                break
            mark = dirty
            mag = np.where(eligible, np.abs(corr), -np.inf)
            j = int(np.argmax(mag)) if n else 0
            stalled = lam - lam_next <= stall_tol and not (
                j == last_freed[0] and lam == last_freed[1]
            )
            if n and stalled:
                # a column is pinned exactly at the current lambda (the path
                # start, an exact tie, a duplicate); enter it with a zero
                # coefficient rather than waiting for a root that never comes
                sgn_j = 1.0 if corr[j] >= 0 else -1.0
                try:
                    _add(j, sgn_j)
                except _DependentColumn:
                    excluded[j] = True
                    degenerate = True
                    continue
                corr[j] = sgn_j * lam_next
                lam = lam_next
            else:
                reached = _descend(lam0)
                if reached is None:
                    changed = False
                    break
                lam = reached
            if dirty != mark:
                changed = True
                break
        if not changed:
            break
        if dirty >= 64:
            _refresh()
        coeffs = np.zeros(n)
        sup_arr = np.array(support, dtype=int)
        coeffs[sup_arr] = w
        entries.append(
            PathEntry(lam=lam, model=SparseModel(coeffs, sup_arr, lam), signs=np.array(signs))
        )
        if len(support) >= cap:
            break
    if guard == 0:
        warnings.warn("lasso path failed to settle; truncating")

    coeffs = np.zeros(n)
    sup_arr = np.array(support, dtype=int)
    if support:
        try:
            coeffs[sup_arr] = _solve_spd(
                phi[:, sup_arr].T @ phi[:, sup_arr], phi[:, sup_arr].T @ z
            )
        except scipy.linalg.LinAlgError:
            degenerate = True
            coeffs[sup_arr] = w
    return SparsePath(
        entries=entries,
        debiased=SparseModel(coeffs, sup_arr, lam if entries else 0.0),
        degenerate=degenerate,
    )


def omp(phi, z, max_terms=None, tol=None):
    """Orthogonal matching pursuit with a full least-squares re-fit per step.

    Selection maximizes the column-normalized residual correlation
    (lowest index on ties).  Stops after ``max_terms`` columns or once
    the residual norm falls below ``tol * ||z||``; at least one of the
    two must be given.
    """
    phi, z = _as_problem(phi, z)
    m, n = phi.shape
    if max_terms is None and tol is None:
        raise ValueError("provide max_terms and/or tol")
    cap = min(m, n) if max_terms is None else min(int(max_terms), m, n)
    znorm = np.linalg.norm(z)
    norms = np.sqrt((phi**2).sum(axis=0))
    if np.any(norms == 0.0):
        raise ValueError("design matrix has zero columns: %s" % np.flatnonzero(norms == 0.0))

    support: list[int] = []
    excluded = np.zeros(n, dtype=bool)
    coeffs = np.zeros(n)
    resid = z.copy()
    while len(support) < cap:
        if tol is not None and np.linalg.norm(resid) <= tol * znorm:
            break
        corr = np.abs(phi.T @ resid) / norms
        corr[excluded] = -np.inf
        corr[support] = -np.inf
        j = int(np.argmax(corr))
        if not np.isfinite(corr[j]):
            break
        support.append(j)
        phi_s = phi[:, support]
        try:
            w = _solve_spd(phi_s.T @ phi_s, phi_s.T @ z)
        except scipy.linalg.LinAlgError:
            excluded[j] = True
            support.pop()
            warnings.warn(f"column {j} is linearly dependent on the support; skipping")
            continue
        resid = z - phi_s @ w
    coeffs = np.zeros(n)
    if support:
        coeffs[support] = w
    return SparseModel(coeffs=coeffs, support=np.array(support, dtype=int), lam=0.0)


def loo_errors(phi, z, path, sigma=None):
    """Fast leave-one-out error for every path entry.

    For each support the debiased least-squares fit is scored by the
    closed-form identity: the leave-one-out residual at sample ``q``
    equals the plain residual divided by ``1 - h_q`` with ``h_q`` the
    hat-matrix diagonal.  Consecutive path supports differ by a few
    columns, so the inverse gram and the hat diagonal are carried from
    entry to entry by rank-one updates instead of a refit per entry.
    Errors are normalized by the empirical standard deviation of ``z``
    (population convention).  Entries whose leverage reaches
    ``1 - 1e-10``, or whose support is not strictly smaller than the
    sample count, are marked non-evaluable (infinite error) rather than
    aborting the sweep.
    """
    phi, z = _as_problem(phi, z)
    m, n = phi.shape
    sig = float(np.std(z)) if sigma is None else float(sigma)
    if sig <= 0.0:
        raise ValueError("observations have zero empirical standard deviation")
    colsq = (phi**2).sum(axis=0)

    sup_cur: list[int] = []
    xbuf = np.empty((m, min(m, n)))
    cinv = np.zeros((0, 0))
    rhs = np.zeros(0)
    lev = np.zeros(m)
    stale = False

    def _add(j):
        nonlocal cinv, rhs, lev
        k = len(sup_cur)
        col = phi[:, j]
        if k:
            g = xbuf[:, :k].T @ col
            cg = cinv @ g
            gamma = colsq[j] - g @ cg
            resid_col = col - xbuf[:, :k] @ cg
        else:
            cg = np.zeros(0)
            gamma = colsq[j]
            resid_col = col
        if gamma <= 1e-12 * colsq[j]:
            return False
        new = np.empty((k + 1, k + 1))
        new[:k, :k] = cinv + np.outer(cg, cg) / gamma
        new[:k, k] = -cg / gamma
        new[k, :k] = -cg / gamma
        new[k, k] = 1.0 / gamma
        cinv = new
        lev = lev + resid_col**2 / gamma
        xbuf[:, k] = col
        sup_cur.append(int(j))
        rhs = np.append(rhs, col @ z)
        return True

    def _remove(t):
        nonlocal cinv, rhs, lev
        k = len(sup_cur)
        keep = [i for i in range(k) if i != t]
        ct = cinv[keep, t]
        lev = lev - (xbuf[:, :k] @ cinv[:, t]) ** 2 / cinv[t, t]
        cinv = cinv[np.ix_(keep, keep)] - np.outer(ct, ct) / cinv[t, t]
        xbuf[:, t : k - 1] = xbuf[:, t + 1 : k]
        del sup_cur[t]
        rhs = np.delete(rhs, t)

    def _sync(sup):
        # diff against the carried support; fall back to a full rebuild
        # whenever the incremental state is stale or the diff is not a
        # plain drop-then-append sequence
        nonlocal cinv, rhs, lev, sup_cur, stale
        if not stale:
            new_set = set(sup)
            drops = [t for t, i in enumerate(sup_cur) if i not in new_set]
            for t in reversed(drops):
                _remove(t)
            if sup_cur == sup[: len(sup_cur)]:
                ok = all(_add(j) for j in sup[len(sup_cur) :])
                if ok:
                    return True
            stale = True
        if len(sup) > xbuf.shape[1]:
            return False
        sup_cur = []
        cinv = np.zeros((0, 0))
        rhs = np.zeros(0)
        lev = np.zeros(m)
        if all(_add(j) for j in sup):
            stale = False
            return True
        stale = True
        return False

    debiased, leverages = [], []
    errors = np.full(len(path.entries), np.inf)
    for t, entry in enumerate(path.entries):
        sup = entry.model.support.tolist()
        coeffs = np.zeros(n)
        if len(sup) >= m or not _sync(sup):
            stale = True
            debiased.append(coeffs)
            leverages.append(np.ones(m))
            continue
        k = len(sup_cur)
        w = cinv @ rhs if k else np.zeros(0)
        coeffs[np.array(sup_cur, dtype=int)] = w
        fit = xbuf[:, :k] @ w if k else np.zeros(m)
        debiased.append(coeffs)
        leverages.append(lev.copy())
        if k and np.max(lev) >= 1.0 - LEVERAGE_GUARD:
            continue
        errors[t] = float(np.mean(((z - fit) / ((1.0 - lev) * sig)) ** 2))

    all_bad = not np.any(np.isfinite(errors))
    best = len(errors) - 1 if all_bad else int(np.argmin(errors))
    return LooReport(
        debiased=debiased,
        leverages=leverages,
        errors=errors,
        best=best,
        all_non_evaluable=all_bad,
    )


def filars(phi, z, lambda_stop=None, max_terms=None, return_details=False):
    """One lasso path plus a fast leave-one-out sweep; returns the winner.

    Constant observations (zero empirical standard deviation) are
    scored with an absolute leave-one-out error instead.  When every
    entry is non-evaluable the debiased terminal model is returned with
    a warning.
    """
    phi, z = _as_problem(phi, z)
    path = ilars(phi, z, lambda_stop=lambda_stop, max_terms=max_terms)
    if not path.entries:
        model = path.debiased
        report = LooReport([], [], np.zeros(0), best=-1, all_non_evaluable=True)
        return (model, path, report) if return_details else model
    sigma = None if np.std(z) > 0.0 else 1.0
    report = loo_errors(phi, z, path, sigma=sigma)
    if report.all_non_evaluable:
        warnings.warn("every path entry was non-evaluable; using the terminal re-fit")
        model = path.debiased
    else:
        entry = path.entries[report.best]
        model = SparseModel(
            coeffs=report.debiased[report.best],
            support=entry.model.support.copy(),
            lam=entry.lam,
        )
    return (model, path, report) if return_details else model


def predict(model, basis, samples):
    """Evaluate a sparse expansion; only support columns are computed."""
    pts = samples.matrix if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.shape[1] != basis.dim:
        raise ValueError(f"samples have dimension {pts.shape[1]}, basis expects {basis.dim}")
    if model.nnz == 0:
        return np.zeros(pts.shape[0])
    cols = design_columns(basis, pts, model.support)
    return cols @ model.coeffs[model.support]
