"""Oscillatory six-variable benchmark for the sparse regression solvers.

The target mixes shallow quadratic wells with strong cosine
oscillation, so its Legendre expansion is high-degree yet very sparse:
a good stress test for support recovery.  Each configured method is
fitted on its own training draw and scored by the mean pointwise
relative error on fresh test samples.
"""

from __future__ import annotations

import sys

import numpy as np

from ..basis import PolyFamily, design_matrix, draw_samples, total_degree_basis
from ..sreg import SparseModel, filars, ilars, ols, omp, predict
from ..tensor import CountingEvaluator, derive_seed, eval_low_rank, group_split, hslrta
from .config import config_hash, with_defaults
from .results import ResultRecord
from .timing import median_time

DIM = 6

# (degree, training samples) pairs run when the config does not pin them
SCHEDULES = {
    "OLS": ((8, 7000),),
    "OMP": ((8, 320), (10, 500), (12, 620)),
    "ILARS": ((8, 320), (10, 500), (12, 620)),
    "FILARS": ((8, 320), (10, 500), (12, 620)),
    "HSLRTA": ((12, 1500), (14, 1150), (16, 1300)),
}

DEFAULT_METHODS = ("OMP", "FILARS", "HSLRTA")

OMP_RTOL = 1e-8


def rastrigin(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    return 10.0 * pts.shape[1] + np.sum(
        pts * pts - 10.0 * np.cos(2.0 * np.pi * pts), axis=1
    )


def relative_mean_error(exact, approx, cutoff=1e-14):
    """Mean pointwise relative error, excluding near-zero references.

    Returns the error together with the number of excluded samples.
    """
    exact = np.asarray(exact, dtype=float)
    approx = np.asarray(approx, dtype=float)
    mask = np.abs(exact) > cutoff
    excluded = int(np.count_nonzero(~mask))
    if not mask.any():
        raise ValueError("every reference value sits below the exclusion cutoff")
    eps = float(np.mean(np.abs(exact[mask] - approx[mask]) / np.abs(exact[mask])))
    return eps, excluded


def _schedule(cfg, method):
    base = SCHEDULES[method]
    if cfg.degree:
        lookup = dict(base)
        m = cfg.train or lookup.get(cfg.degree, base[-1][1])
        return ((cfg.degree, m),)
    if cfg.train:
        return tuple((p, cfg.train) for p, _ in base)
    return base


def _fit_sparse(method, phi, w):
    cap = min(phi.shape) // 2  # leave-one-out degrades toward interpolation
    if method == "OLS":
        coeffs = ols(phi, w)
        return SparseModel(coeffs=coeffs, support=np.arange(phi.shape[1]), lam=0.0)
    if method == "OMP":
        return omp(phi, w, max_terms=cap, tol=OMP_RTOL)
    if method == "ILARS":
        return ilars(phi, w, max_terms=cap).debiased
    return filars(phi, w, max_terms=cap)


def run_rastrigin(cfg):
    """Fit every configured method/degree pair and score fresh samples."""
    cfg = with_defaults(cfg, test=1000, groups=(2, 2, 2), ranks=(2, 2))
    chash = config_hash(cfg)
    fams = (PolyFamily.LEGENDRE_UNIFORM,) * DIM
    test = draw_samples(fams, cfg.test, derive_seed(cfg.seed, 62)).matrix
    w_test = rastrigin(test)

    methods = (cfg.method,) if cfg.method else DEFAULT_METHODS
    records = []
    for method in methods:
        for degree, m in _schedule(cfg, method):
            if method == "HSLRTA":
                rec = _run_hslrta(cfg, degree, m, test, w_test, chash)
            else:
                rec = _run_regression(cfg, method, degree, m, test, w_test, chash)
            records.append(rec)
    return records


def _tree_evals(n_groups, ranks, fibers):
    """Evaluation count of one linear-tree decomposition pass."""
    if n_groups == 2:
        return ranks[0] * (2 * fibers + 4)
    return ranks[0] * (fibers + _tree_evals(n_groups - 1, ranks[1:], fibers))


def _fibers_for_budget(n_groups, ranks, budget):
    """Largest per-group fiber count whose full pass fits the budget."""
    base = _tree_evals(n_groups, ranks, 0)
    slope = _tree_evals(n_groups, ranks, 1) - base
    fibers = (budget - base) // slope
    if fibers < 2:
        raise ValueError(f"budget {budget} cannot cover even two fiber samples")
    return int(fibers)


def _run_regression(cfg, method, degree, m, test, w_test, chash):
    fams = (PolyFamily.LEGENDRE_UNIFORM,) * DIM
    train = draw_samples(fams, m, derive_seed(cfg.seed, 61, degree)).matrix
    w_train = rastrigin(train)
    basis = total_degree_basis(fams, DIM, degree)

    def offline():
        phi = design_matrix(basis, train)
        return _fit_sparse(method, phi, w_train)

    model, offline_s = median_time(offline, cfg.timing_reps)
    predictions, online_s = median_time(
        lambda: predict(model, basis, test), cfg.timing_reps
    )
    eps, excluded = relative_mean_error(w_test, predictions)
    if excluded:
        print(
            f"rastrigin/{method} p={degree}: excluded {excluded} near-zero "
            "test references",
            file=sys.stderr,
        )
    return ResultRecord(
        experiment="rastrigin",
        method=method,
        p=degree,
        M=m,
        N_terms=int(model.nnz),
        epsilon=eps,
        offline_s=offline_s,
        online_s_per_sample=online_s / test.shape[0],
        evals=m,
        seed=cfg.seed,
        config_hash=chash,
    )


def _run_hslrta(cfg, degree, budget, test, w_test, chash):
    split = group_split("uniform", cfg.groups, degree)
    budget = cfg.budget or budget
    fibers = cfg.fibers or _fibers_for_budget(len(cfg.groups), cfg.ranks, budget)

    def offline():
        counter = CountingEvaluator(rastrigin, budget)
        approx = hslrta(
            counter,
            split,
            cfg.ranks,
            fibers,
            seed=derive_seed(cfg.seed, 63, degree),
            tol=cfg.tol,
        )
        return approx, counter

    (approx, counter), offline_s = median_time(offline, cfg.timing_reps)
    predictions, online_s = median_time(
        lambda: eval_low_rank(approx, test), cfg.timing_reps
    )
    eps, excluded = relative_mean_error(w_test, predictions)
    if excluded:
        print(
            f"rastrigin/HSLRTA p={degree}: excluded {excluded} near-zero "
            "test references",
            file=sys.stderr,
        )
    return ResultRecord(
        experiment="rastrigin",
        method="HSLRTA",
        p=degree,
        M=counter.calls,
        N_terms=int(approx.rank),
        epsilon=eps,
        offline_s=offline_s,
        online_s_per_sample=online_s / test.shape[0],
        evals=counter.calls,
        seed=cfg.seed,
        config_hash=chash,
    )
