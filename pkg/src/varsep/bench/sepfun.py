"""Spatial-stochastic exponential benchmark for the greedy separation loop.

The target couples two spatial coordinates with three Gaussian
parameters inside an exponential, so it is not finitely separable yet
its separation rank decays fast.  The driver builds the greedy
separated form, fits independent sparse surrogates for its stochastic
factors, and scores both variants by the average relative nodal-norm
error on fresh parameter draws.
"""

from __future__ import annotations

import os

import numpy as np

from ..basis import draw_samples, families_from_tag
from ..nvs import decouple_zetas, eval_separated, nvs_function, save_solution
from ..tensor import derive_seed
from .config import config_hash, with_defaults
from .results import ResultRecord, write_table
from .timing import median_time

DIM = 3
DENSITY_BINS = 60
TIMING_SAMPLES = 200
CHUNK = 500


def target_field(points, xi):
    """exp(-(x1*a + x2*b + x1*x2*c)/2) on the given nodes."""
    pts = np.asarray(points, dtype=float)
    xi = np.asarray(xi, dtype=float).reshape(DIM)
    expo = pts[:, 0] * xi[0] + pts[:, 1] * xi[1] + pts[:, 0] * pts[:, 1] * xi[2]
    return np.exp(-0.5 * expo)


def unit_grid(n):
    """n-by-n uniform nodes on the closed unit square, row-major."""
    side = np.linspace(0.0, 1.0, int(n))
    xx, yy = np.meshgrid(side, side, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


class _PointCounter:
    """Wraps the field so reported evals count true point evaluations."""

    def __init__(self, func):
        self.func = func
        self.calls = 0

    def __call__(self, points, xi):
        points = np.asarray(points, dtype=float)
        self.calls += points.shape[0]
        return self.func(points, xi)


def _mean_square(arr):
    return float(np.mean(arr * arr))


def _chunks(matrix, size):
    for start in range(0, matrix.shape[0], size):
        yield matrix[start : start + size]


def run_sepfun(cfg):
    """Build NVS and NVS+FILARS surrogates of the target and score them."""
    cfg = with_defaults(
        cfg, grid=50, candidates=500, terms=20, degree=9, train=1000, test=10000
    )
    chash = config_hash(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    fams = families_from_tag("normal", DIM)
    nodes = unit_grid(cfg.grid)
    want_fit = cfg.method in ("", "NVS+FILARS")
    want_nvs = cfg.method in ("", "NVS")
    if not (want_fit or want_nvs):
        raise ValueError(f"unknown sepfun method {cfg.method!r}")

    counter = _PointCounter(target_field)
    cands = draw_samples(fams, cfg.candidates, derive_seed(cfg.seed, 71))
    solution = nvs_function(counter, nodes, cands, max_terms=cfg.terms)
    nvs_evals = counter.calls

    surrogates = None
    fit_evals = 0
    fit_off = 0.0
    if want_fit:
        train = draw_samples(fams, cfg.train, derive_seed(cfg.seed, 72))

        def fit():
            return decouple_zetas(
                solution,
                train,
                method="filars",
                family="normal",
                degree=cfg.degree,
                seed=cfg.seed,
            )

        mark = counter.calls
        surrogates, fit_off = median_time(fit, cfg.timing_reps)
        fit_evals = (counter.calls - mark) // max(cfg.timing_reps, 1)
        solution.surrogates = surrogates

    _, nvs_off = median_time(
        lambda: nvs_function(target_field, nodes, cands, max_terms=cfg.terms),
        cfg.timing_reps,
    )

    probe = draw_samples(fams, TIMING_SAMPLES, derive_seed(cfg.seed, 73)).matrix
    _, t_nvs = median_time(lambda: eval_separated(solution, probe), cfg.timing_reps)
    online_nvs = t_nvs / TIMING_SAMPLES
    online_fit = 0.0
    if want_fit:
        _, t_fit = median_time(
            lambda: eval_separated(solution, probe, use_surrogates=True),
            cfg.timing_reps,
        )
        online_fit = t_fit / TIMING_SAMPLES

    test = draw_samples(fams, cfg.test, derive_seed(cfg.seed, 74)).matrix
    ratio_nvs = 0.0
    ratio_fit = 0.0
    node_sum = np.zeros(nodes.shape[0])
    node_sq = np.zeros(nodes.shape[0])
    for block in _chunks(test, CHUNK):
        exact = np.column_stack([target_field(nodes, xi) for xi in block])
        den = np.linalg.norm(exact, axis=0)
        approx = eval_separated(solution, block)
        ratio_nvs += float(np.sum(np.linalg.norm(exact - approx, axis=0) / den))
        if want_fit:
            approx = eval_separated(solution, block, use_surrogates=True)
            ratio_fit += float(np.sum(np.linalg.norm(exact - approx, axis=0) / den))
        node_sum += exact.sum(axis=1)
        node_sq += (exact * exact).sum(axis=1)
    eps_nvs = ratio_nvs / test.shape[0]
    eps_fit = ratio_fit / test.shape[0]

    _write_residual_curve(cfg, solution, cands, surrogates)
    node_var = node_sq / test.shape[0] - (node_sum / test.shape[0]) ** 2
    _write_densities(cfg, solution, nodes, test, node_var, want_fit)
    save_solution(solution, os.path.join(cfg.out, "sepfun_surrogate.json"))

    records = []
    if want_nvs:
        records.append(
            ResultRecord(
                experiment="sepfun",
                method="NVS",
                p=0,
                M=cfg.candidates,
                N_terms=solution.n_terms,
                epsilon=eps_nvs,
                offline_s=nvs_off,
                online_s_per_sample=online_nvs,
                evals=nvs_evals,
                seed=cfg.seed,
                config_hash=chash,
            )
        )
    if want_fit:
        records.append(
            ResultRecord(
                experiment="sepfun",
                method="NVS+FILARS",
                p=cfg.degree,
                M=cfg.train,
                N_terms=solution.n_terms,
                epsilon=eps_fit,
                offline_s=nvs_off + fit_off,
                online_s_per_sample=online_fit,
                evals=nvs_evals + fit_evals,
                seed=cfg.seed,
                config_hash=chash,
            )
        )
    return records


def _write_residual_curve(cfg, solution, cands, surrogates):
    """Mean-square residual over the candidate set after 0..N terms."""
    pts = cands.matrix
    snap = np.column_stack([target_field(solution.points, xi) for xi in pts])
    zex = solution.zeta_values(pts)
    zsur = None
    if surrogates is not None:
        zsur = np.column_stack([s.evaluate(pts) for s in surrogates])

    res_e = snap.copy()
    res_s = snap.copy()
    rows = [(0.0, _mean_square(res_e)) + (() if zsur is None else (_mean_square(res_s),))]
    for k in range(solution.n_terms):
        res_e -= np.outer(solution.fields[:, k], zex[:, k])
        row = (float(k + 1), _mean_square(res_e))
        if zsur is not None:
            res_s -= np.outer(solution.fields[:, k], zsur[:, k])
            row += (_mean_square(res_s),)
        rows.append(row)
    header = ("terms", "nvs_residual")
    if zsur is not None:
        header += ("surrogate_residual",)
    write_table(os.path.join(cfg.out, "sepfun_residual_vs_terms.csv"), header, rows)


def _write_densities(cfg, solution, nodes, test, node_var, want_fit):
    """Histogram tables at the nodes of largest and smallest variance."""
    for tag, node_idx in (
        ("maxvar", int(np.argmax(node_var))),
        ("minvar", int(np.argmin(node_var))),
    ):
        node = nodes[node_idx]
        ref = np.concatenate(
            [target_field(node.reshape(1, -1), xi) for xi in test]
        )
        edges = np.histogram_bin_edges(ref, DENSITY_BINS)
        columns = [np.histogram(ref, bins=edges, density=True)[0]]
        header = ["left", "right", "reference", "nvs"]
        approx = []
        approx_fit = []
        for block in _chunks(test, CHUNK):
            z = solution.zeta_values(block)
            approx.append(solution.fields[node_idx] @ z.T)
            if want_fit:
                zf = np.column_stack([s.evaluate(block) for s in solution.surrogates])
                approx_fit.append(solution.fields[node_idx] @ zf.T)
        columns.append(np.histogram(np.concatenate(approx), bins=edges, density=True)[0])
        if want_fit:
            columns.append(
                np.histogram(np.concatenate(approx_fit), bins=edges, density=True)[0]
            )
            header.append("nvs_filars")
        rows = np.column_stack([edges[:-1], edges[1:]] + columns)
        write_table(
            os.path.join(cfg.out, f"sepfun_density_{tag}.csv"), tuple(header), rows
        )
