"""Separated-representation surrogates for parametric functions and PDEs.

The package is organised around five computational layers:

``basis``
    orthonormal polynomial families, total-degree multi-index sets,
    parameter sampling and design matrices;
``sreg``
    sparse regression (ordinary least squares, orthogonal matching
    pursuit, a lasso path with a closed-form regularization schedule,
    and fast leave-one-out model selection);
``tensor``
    sparse low-rank and hierarchical tensor-format approximation of
    black-box functions over grouped variables;
``field``
    bilinear finite elements on the unit square, Karhunen-Loeve
    expansions of Gaussian random fields, affine operator assembly and
    Riesz representers;
``nvs``
    greedy variable separation of parametric fields and of solutions of
    parametric elliptic problems, with an offline/online residual
    estimator;

and a command-line harness, ``bench``, that reproduces the benchmark
experiments and writes CSV result tables.
"""

from varsep.basis import (
    Basis,
    MultiIndexSet,
    PolyFamily,
    SampleSet,
    design_matrix,
    draw_samples,
    eval_poly1d,
    total_degree_basis,
    total_degree_set,
)
from varsep.field import (
    AffineOperator,
    AffineRhs,
    Grid,
    KLExpansion,
    VProduct,
    affine_operator_from_kl,
    assemble_kl,
    assemble_rhs,
    build_grid,
    kl_realize,
    solve_deterministic,
)
from varsep.nvs import (
    ResidualEstimator,
    SeparatedFunction,
    SeparatedSolution,
    ZetaSurrogate,
    build_estimator,
    decouple_zetas,
    estimate_error,
    eval_separated,
    gram_schmidt,
    load_solution,
    nvs_function,
    nvs_spde,
    save_solution,
    zeta_next,
)
from varsep.sreg import SparseModel, SparsePath, filars, ilars, ols, omp, predict
from varsep.tensor import (
    CountingEvaluator,
    GroupSplit,
    HierApprox,
    RankMApprox,
    eval_low_rank,
    group_split,
    hslrta,
    load_approx,
    save_approx,
    sparse_rank_m,
    sparse_rank_one,
)

__all__ = [
    "Basis",
    "MultiIndexSet",
    "PolyFamily",
    "SampleSet",
    "design_matrix",
    "draw_samples",
    "eval_poly1d",
    "total_degree_basis",
    "total_degree_set",
    "SparseModel",
    "SparsePath",
    "filars",
    "ilars",
    "ols",
    "omp",
    "predict",
    "CountingEvaluator",
    "GroupSplit",
    "HierApprox",
    "RankMApprox",
    "eval_low_rank",
    "group_split",
    "hslrta",
    "load_approx",
    "save_approx",
    "sparse_rank_m",
    "sparse_rank_one",
    "AffineOperator",
    "AffineRhs",
    "Grid",
    "KLExpansion",
    "VProduct",
    "affine_operator_from_kl",
    "assemble_kl",
    "assemble_rhs",
    "build_grid",
    "kl_realize",
    "solve_deterministic",
    "ResidualEstimator",
    "SeparatedFunction",
    "SeparatedSolution",
    "ZetaSurrogate",
    "build_estimator",
    "decouple_zetas",
    "estimate_error",
    "eval_separated",
    "gram_schmidt",
    "load_solution",
    "nvs_function",
    "nvs_spde",
    "save_solution",
    "zeta_next",
]

__version__ = "0.1.0"
