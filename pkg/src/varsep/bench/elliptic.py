"""Stochastic diffusion benchmark: separated Galerkin solve and decoupling."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from ..basis import draw_samples, families_from_tag
from ..field import (
    affine_operator_from_kl,
    assemble_kl,
    assemble_rhs,
    build_grid,
    field_to_csv,
    solve_deterministic,
)
from ..nvs import (
    decouple_zetas,
    eval_separated,
    load_solution,
    nvs_spde,
    save_solution,
)
from ..tensor import derive_seed
from .config import config_hash, with_defaults
from .results import ResultRecord, write_results, write_table
from .timing import median_time

KL_VARIANCE = 3.0
KL_LENGTH = 0.5
KL_MEAN = 8.0
DENSITY_BINS = 60
TIMING_SAMPLES = 200
FEM_TIMING_SAMPLES = 20
CHUNK = 500

METHODS = ("NVS", "NVS+HSLRTA")

SOLUTION_FILE = "elliptic_surrogate.json"
META_FILE = "elliptic_offline_meta.json"


def _build_problem(cfg):
    grid = build_grid(cfg.grid, cfg.grid)
    kl = assemble_kl(KL_VARIANCE, KL_LENGTH, KL_LENGTH, grid, cfg.kl_dims, mean=KL_MEAN)
    op = affine_operator_from_kl(kl, grid)
    rhs = assemble_rhs(grid, cfg.kl_dims)
    return grid, op, rhs


def _residual_table(solution, cand_pts):
    """Mean estimated residual entering each greedy step, exact and surrogate."""
    est = solution.estimator
    zex = solution.zeta_values(cand_pts)
    zsur = None
    if solution.surrogates:
        zsur = np.column_stack([s.evaluate(cand_pts) for s in solution.surrogates])
    header = ["N", "nvs_residual"]
    if zsur is not None:
        header.append("surrogate_residual")
    rows = []
    for k in range(solution.n_terms):
        row = [k + 1, float(np.mean(est.value_many(cand_pts, zetas=zex, n_terms=k)))]
        if zsur is not None:
            row.append(float(np.mean(est.value_many(cand_pts, zetas=zsur, n_terms=k))))
        rows.append(row)
    return tuple(header), rows


def _run_offline(cfg, grid, op, rhs, methods, out):
    fams = families_from_tag("uniform", cfg.kl_dims)
    cand_pts = draw_samples(fams, cfg.candidates, derive_seed(cfg.seed, 11)).matrix

    t0 = time.perf_counter()
    solution = nvs_spde(op, rhs, cand_pts, tol=cfg.tol, max_terms=cfg.terms, seed=cfg.seed)
    nvs_s = time.perf_counter() - t0

    decouple_s = 0.0
    surrogate_evals = 0
    if "NVS+HSLRTA" in methods:
        t0 = time.perf_counter()
        surrogates = decouple_zetas(
            solution,
            None,
            method="hslrta",
            family="uniform",
            groups=cfg.groups,
            group_degrees=cfg.degree,
            ranks=cfg.ranks,
            fiber_counts=cfg.fibers,
            seed=cfg.seed,
            budget=cfg.budget or None,
            tol=cfg.tol,
        )
        decouple_s = time.perf_counter() - t0
        solution.surrogates = surrogates
        surrogate_evals = sum(s.evals for s in surrogates)

    header, rows = _residual_table(solution, cand_pts)
    write_table(out / "elliptic_residual_vs_terms.csv", header, rows)
    save_solution(solution, out / SOLUTION_FILE)
    meta = {
        "nvs_s": nvs_s,
        "decouple_s": decouple_s,
        "surrogate_evals": surrogate_evals,
        "n_terms": solution.n_terms,
        "residual_history": solution.residual_history,
        "surrogate_validation": [
            {"rms": s.validation_error, "max": s.validation_max, "flagged": s.flagged}
            for s in (solution.surrogates or [])
        ],
        "config_hash": config_hash(cfg),
    }
    with open(out / META_FILE, "w") as fh:
        json.dump(meta, fh, indent=2)
    return solution, meta


def _load_offline(cfg, op, rhs, methods, out):
    solution = load_solution(out / SOLUTION_FILE, op=op, rhs=rhs)
    if "NVS+HSLRTA" in methods and not solution.surrogates:
        raise ValueError(
            "stored representation has no surrogates; rerun the offline stage"
        )
    with open(out / META_FILE) as fh:
        meta = json.load(fh)
    return solution, meta


def _fem_reference(op, rhs, test_pts):
    n = test_pts.shape[0]
    ref = np.empty((op.matrices_full[0].shape[0], n))
    for i in range(n):
        ref[:, i] = solve_deterministic(op, rhs, test_pts[i])
    return ref


def _node_variance(fields, z):
    """Nodal variance of a separated field from factor sample covariance."""
    cov = np.cov(z, rowvar=False, bias=True).reshape(z.shape[1], z.shape[1])
    return np.einsum("nk,kl,nl->n", fields, cov, fields)


def _density_rows(ref_vals, method_vals):
    edges = np.histogram_bin_edges(ref_vals, bins=DENSITY_BINS)
    cols = [edges[:-1], edges[1:], np.histogram(ref_vals, bins=edges, density=True)[0]]
    for vals in method_vals:
        cols.append(np.histogram(vals, bins=edges, density=True)[0])
    return np.column_stack(cols)


def _run_online(cfg, grid, op, rhs, solution, meta, methods, out, chash):
    fams = families_from_tag("uniform", cfg.kl_dims)
    test_pts = draw_samples(fams, cfg.test, derive_seed(cfg.seed, 23)).matrix
    n_test = test_pts.shape[0]

    ref = _fem_reference(op, rhs, test_pts)

    streams = []
    if "NVS" in methods:
        streams.append(("NVS", solution.zeta_values(test_pts)))
    if "NVS+HSLRTA" in methods:
        zsur = np.column_stack([s.evaluate(test_pts) for s in solution.surrogates])
        streams.append(("NVS+HSLRTA", zsur))

    fields = solution.fields
    eps = {name: 0.0 for name, _ in streams}
    for i0 in range(0, n_test, CHUNK):
        sl = slice(i0, min(i0 + CHUNK, n_test))
        refc = ref[:, sl]
        rnorm = np.linalg.norm(refc, axis=0)
        for name, z in streams:
            diff = refc - fields @ z[sl].T
            eps[name] += float(np.sum(np.linalg.norm(diff, axis=0) / rnorm))
    eps = {name: total / n_test for name, total in eps.items()}

    fem_var = ref.var(axis=1)
    field_to_csv(grid, ref.mean(axis=1), out / "elliptic_mean_fem.csv")
    field_to_csv(grid, fem_var, out / "elliptic_var_fem.csv")
    tags = {"NVS": "nvs", "NVS+HSLRTA": "hslrta"}
    for name, z in streams:
        field_to_csv(grid, fields @ z.mean(axis=0), out / f"elliptic_mean_{tags[name]}.csv")
        field_to_csv(grid, _node_variance(fields, z), out / f"elliptic_var_{tags[name]}.csv")

    # density nodes come from the reference variance over free nodes only;
    # constrained nodes are identically zero and would always win the min
    free_var = fem_var[grid.free]
    node_max = int(grid.free[np.argmax(free_var)])
    node_min = int(grid.free[np.argmin(free_var)])
    header = ("left", "right", "reference") + tuple(tags[name] for name, _ in streams)
    for label, node in (("maxvar", node_max), ("minvar", node_min)):
        rows = _density_rows(ref[node], [fields[node] @ z.T for _, z in streams])
        write_table(out / f"elliptic_density_{label}.csv", header, rows)

    probe = test_pts[:FEM_TIMING_SAMPLES]
    _, fem_s = median_time(
        lambda: [solve_deterministic(op, rhs, xi) for xi in probe], cfg.timing_reps
    )
    fem_per = fem_s / len(probe)
    timing_probe = test_pts[:TIMING_SAMPLES]
    per_sample = {}
    for name, _ in streams:
        flag = name == "NVS+HSLRTA"
        _, batch_s = median_time(
            lambda use=flag: eval_separated(solution, timing_probe, use_surrogates=use),
            cfg.timing_reps,
        )
        per_sample[name] = batch_s / len(timing_probe)

    records = [
        ResultRecord(
            experiment="elliptic",
            method="FEM",
            p=0,
            M=n_test,
            N_terms=0,
            epsilon=0.0,
            offline_s=0.0,
            online_s_per_sample=fem_per,
            evals=n_test,
            seed=cfg.seed,
            config_hash=chash,
        )
    ]
    offline = {
        "NVS": (meta["nvs_s"], solution.n_terms),
        "NVS+HSLRTA": (meta["nvs_s"] + meta["decouple_s"], meta["surrogate_evals"]),
    }
    for name, _ in streams:
        off_s, evals = offline[name]
        records.append(
            ResultRecord(
                experiment="elliptic",
                method=name,
                p=cfg.degree if name == "NVS+HSLRTA" else 0,
                M=cfg.candidates,
                N_terms=solution.n_terms,
                epsilon=eps[name],
                offline_s=off_s,
                online_s_per_sample=per_sample[name],
                evals=evals,
                seed=cfg.seed,
                config_hash=chash,
            )
        )
    write_results(records, out / "elliptic_results.csv")
    return records


def run_elliptic(cfg):
    """Separated-solve benchmark for the stochastic diffusion problem.

    The offline stage runs the greedy Galerkin separation over a
    uniform candidate pool, decouples the stochastic factors with a
    hierarchical low-rank fit, and stores the representation plus a
    residual-per-term table.  The online stage measures relative nodal
    errors against direct finite element solves over fresh samples,
    writes mean, variance and density tables, and times all three
    evaluation routes.  ``cfg.stage`` selects "offline", "online", or
    "all".
    """
    cfg = with_defaults(
        cfg,
        grid=50,
        kl_dims=32,
        candidates=500,
        terms=5,
        test=10000,
        degree=5,
        groups=(8, 8, 8, 8),
        ranks=(3, 3, 3),
        fibers=400,
    )
    if cfg.method and cfg.method not in METHODS:
        raise ValueError(f"unknown elliptic method {cfg.method!r}; pick from {METHODS}")
    if cfg.stage not in ("offline", "online", "all"):
        raise ValueError(f"unknown stage {cfg.stage!r}; pick offline, online or all")
    methods = METHODS if not cfg.method else (cfg.method,)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)

    grid, op, rhs = _build_problem(cfg)
    if cfg.stage in ("offline", "all"):
        solution, meta = _run_offline(cfg, grid, op, rhs, methods, out)
    else:
        solution, meta = _load_offline(cfg, op, rhs, methods, out)
    if cfg.stage == "offline":
        return []
    return _run_online(cfg, grid, op, rhs, solution, meta, methods, out, chash)
