"""Sparse low-rank approximation of functions of grouped variables.

A target ``w(xi_1, ..., xi_r)`` over ``r`` mutually independent groups
of coordinates is approximated by sums of separable terms.  Each
rank-one term is built from anchored fibers: the function is sampled
along one group at a time while the remaining groups sit at a fixed
anchor point, each fiber is fit by sparse regression, and the last
group's fit is scaled so that the anchor amplitude cancels.  Greedy
deflation stacks such terms, and the hierarchical driver applies the
same construction recursively along a linear dimension tree, splitting
off the trailing group at every level.

Evaluations of the target function are routed through a counting
evaluator so sampling budgets can be enforced end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .basis import (
    PolyFamily,
    SampleSet,
    design_matrix,
    draw_samples,
    families_from_tag,
    total_degree_basis,
)
from .sreg import SparseModel, filars, predict

ANCHOR_RTOL = 1e-10
VALIDATION_SIZE = 200
REANCHOR_TRIES = 3
INFLATION_CAP = 10.0
ANCHOR_PREFERENCE = 0.2

FORMAT_NAME = "varsep-lowrank"
FORMAT_VERSION = 1


class BudgetExceededError(RuntimeError):
    """The evaluation budget would be exceeded by the requested call."""


class DegenerateAnchorError(RuntimeError):
    """The fitted leading factors are numerically zero at the anchor."""


def derive_seed(seed, *tags):
    """Stable child seed from a base seed and integer tags."""
    seq = np.random.SeedSequence([int(seed), *(int(t) for t in tags)])
    return int(seq.generate_state(1)[0])


def _rms(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(values**2)))


class CountingEvaluator:
    """Black-box function wrapper with a call counter and optional budget.

    ``func`` maps an ``(n, d)`` array of points to ``n`` values.  Every
    evaluated point counts toward the budget; a call that would push the
    counter past the budget raises :class:`BudgetExceededError` before
    evaluating anything.
    """

    def __init__(self, func, budget=None):
        self.func = func
        self.budget = budget
        self.calls = 0

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(1, -1)
        n = points.shape[0]
        if self.budget is not None and self.calls + n > self.budget:
            raise BudgetExceededError(
                f"evaluation budget {self.budget} exhausted at {self.calls} calls"
            )
        self.calls += n
        values = np.asarray(self.func(points), dtype=float).reshape(n)
        return values


@dataclass(frozen=True)
class GroupSplit:
    """Ordered partition of the coordinates into groups, one basis each."""

    bases: tuple

    def __post_init__(self):
        if len(self.bases) < 1:
            raise ValueError("at least one group is required")

    @property
    def r(self):
        return len(self.bases)

    @property
    def dims(self):
        return tuple(b.dim for b in self.bases)

    @property
    def dim(self):
        return sum(self.dims)

    @property
    def families(self):
        fams = ()
        for b in self.bases:
            fams = fams + tuple(b.families)
        return fams

    @property
    def slices(self):
        out = []
        start = 0
        for d in self.dims:
            out.append(slice(start, start + d))
            start += d
        return tuple(out)


def group_split(family_tag, dims, degrees, cap=None):
    """Convenience builder: one total-degree basis per coordinate group."""
    dims = tuple(int(d) for d in dims)
    if isinstance(degrees, int):
        degrees = (degrees,) * len(dims)
    kwargs = {} if cap is None else {"cap": cap}
    if isinstance(family_tag, str):
        fams = [families_from_tag(family_tag, d) for d in dims]
    else:
        fams = [family_tag] * len(dims)
    bases = tuple(
        total_degree_basis(f, d, p, **kwargs) for f, d, p in zip(fams, dims, degrees)
    )
    return GroupSplit(bases=bases)


@dataclass
class AnchorPlan:
    """Anchor points and per-group fiber sizes for a greedy rank-m run."""

    anchors: np.ndarray  # (m, dim)
    fiber_counts: tuple
    seed: int

    def __post_init__(self):
        if any(c < 1 for c in self.fiber_counts):
            raise ValueError("fiber counts must be >= 1")


def make_anchor_plan(split, m, fiber_counts, seed):
    if isinstance(fiber_counts, int):
        fiber_counts = (fiber_counts,) * split.r
    fiber_counts = tuple(int(c) for c in fiber_counts)
    if len(fiber_counts) != split.r:
        raise ValueError("one fiber count per group is required")
    anchors = draw_samples(split.families, m, derive_seed(seed, 0)).matrix
    return AnchorPlan(anchors=anchors, fiber_counts=fiber_counts, seed=seed)


def fiber_samples(split, group, anchor, count, seed):
    """Full-dimension samples varying only the coordinates of one group.

    Every row equals ``anchor`` outside group ``group``; the group's own
    coordinates are drawn fresh from its sampling density.
    """
    if not 0 <= group < split.r:
        raise ValueError(f"group index {group} out of range for r={split.r}")
    anchor = np.asarray(anchor, dtype=float).reshape(split.dim)
    pts = np.tile(anchor, (count, 1))
    sub = draw_samples(split.bases[group].families, count, seed)
    pts[:, split.slices[group]] = sub.matrix
    return SampleSet(matrix=pts, seed=seed, families=split.families)


@dataclass
class RankOneTerm:
    """Separable term: a product of per-group sparse basis expansions."""

    factors: tuple  # one SparseModel per group

    def evaluate(self, split, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        out = np.ones(pts.shape[0])
        for model, basis, sl in zip(self.factors, split.bases, split.slices):
            out *= predict(model, basis, pts[:, sl])
        return out


@dataclass
class RankMApprox:
    """Weighted sum of rank-one terms over a fixed group split."""

    split: GroupSplit
    terms: list
    weights: np.ndarray
    stop_reason: str = "max_rank"
    notes: tuple = ()
    history: list = field(default_factory=list)

    @property
    def rank(self):
        return len(self.terms)

    @property
    def budget_exhausted(self):
        return self.stop_reason == "budget"

    @property
    def achieved_ranks(self):
        return (self.rank,)

    def term_values(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        cols = [t.evaluate(self.split, pts) for t in self.terms]
        if not cols:
            return np.zeros((pts.shape[0], 0))
        return np.column_stack(cols)

    def evaluate(self, points):
        return self.term_values(points) @ np.asarray(self.weights, dtype=float)


@dataclass
class HierApprox:
    """Linear-tree separated representation.

    Each node splits its trailing coordinate group off the rest: the
    node's value is ``sum_i inner_i(leading groups) * outer_i(last
    group)`` where every ``inner_i`` is itself a :class:`HierApprox`
    until two groups remain, at which point it is a flat
    :class:`RankMApprox`.
    """

    bases: tuple
    pairs: list  # (inner approx, outer SparseModel) tuples
    stop_reason: str = "max_rank"

    @property
    def rank(self):
        return len(self.pairs)

    @property
    def budget_exhausted(self):
        if self.stop_reason == "budget":
            return True
        return any(inner.budget_exhausted for inner, _ in self.pairs)

    @property
    def achieved_ranks(self):
        if not self.pairs:
            return (0,)
        deeper = max((inner.achieved_ranks for inner, _ in self.pairs), key=len)
        return (self.rank,) + deeper

    def evaluate(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(1, -1)
        d_inner = sum(b.dim for b in self.bases[:-1])
        outer_basis = self.bases[-1]
        out = np.zeros(pts.shape[0])
        for inner, outer_model in self.pairs:
            out += inner.evaluate(pts[:, :d_inner]) * predict(
                outer_model, outer_basis, pts[:, d_inner:]
            )
        return out


def eval_low_rank(approx, points):
    """Evaluate a flat or hierarchical approximation at one or many points."""
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    values = approx.evaluate(pts)
    if single:
        return float(values[0])
    return values


def _zero_term(split):
    factors = tuple(
        SparseModel(np.zeros(b.size), np.array([], dtype=int), 0.0) for b in split.bases
    )
    return RankOneTerm(factors=factors)


def _per_group(value, r):
    if value is None or np.isscalar(value):
        return (value,) * r
    value = tuple(value)
    if len(value) != r:
        raise ValueError("one entry per group is required")
    return value


def sparse_rank_one(split, anchor, fibers, values, lambda_stop=None):
    """Fit one separable term from anchored fiber evaluations.

    ``fibers[k]`` holds full-dimension samples varying only group ``k``
    and ``values[k]`` the target values on them.  Groups before the last
    are fit directly; the last group is fit against the design matrix
    scaled by the product of the leading factors at the anchor, which
    makes the term interpolate the target on every fiber through the
    anchor when the target is separable.

    Raises :class:`DegenerateAnchorError` when that anchor product is
    negligible relative to the leading factors' fiber magnitudes.
    """
    r = split.r
    if len(fibers) != r or len(values) != r:
        raise ValueError("one fiber sample set and value vector per group")
    anchor = np.asarray(anchor, dtype=float).reshape(split.dim)
    lams = _per_group(lambda_stop, r)

    if max(_rms(v) for v in values) == 0.0:
        return _zero_term(split)

    factors = []
    amp = 1.0
    scale = 1.0
    for k in range(r - 1):
        basis = split.bases[k]
        coords = fibers[k].matrix[:, split.slices[k]]
        phi = design_matrix(basis, coords)
        model = filars(phi, np.asarray(values[k], dtype=float), lambda_stop=lams[k])
        factors.append(model)
        scale *= _rms(phi @ model.coeffs)
        amp *= float(predict(model, basis, anchor[split.slices[k]].reshape(1, -1))[0])
    if scale == 0.0 or abs(amp) < ANCHOR_RTOL * scale:
        raise DegenerateAnchorError(
            f"anchor amplitude {amp:.3e} is negligible against scale {scale:.3e}"
        )

    basis = split.bases[r - 1]
    coords = fibers[r - 1].matrix[:, split.slices[r - 1]]
    phi = design_matrix(basis, coords) * amp
    model = filars(phi, np.asarray(values[r - 1], dtype=float), lambda_stop=lams[r - 1])
    factors.append(model)
    return RankOneTerm(factors=tuple(factors))


def sparse_rank_m(evaluator, split, max_rank, tol, plan, lambda_stop=None):
    """Greedy deflation loop: fit rank-one terms to successive residuals.

    After each accepted term the relative magnitude ``eps`` of the new
    term over a fixed validation sample is compared against ``tol``;
    the loop also ends on anchor degeneracy (after re-draws) or on an
    exhausted evaluation budget, in which case the terms built so far
    are returned with ``stop_reason`` set accordingly.
    """
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    if plan.anchors.shape[0] < max_rank:
        raise ValueError("anchor plan is shorter than the requested rank")
    validation = draw_samples(
        split.families, VALIDATION_SIZE, derive_seed(plan.seed, 999)
    ).matrix

    approx = RankMApprox(split=split, terms=[], weights=np.zeros(0))
    seen_pts, seen_vals = [], []  # every evaluated fiber point, for reweighting
    for i in range(max_rank):
        try:
            redraws = [
                draw_samples(
                    split.families, 1, derive_seed(plan.seed, 2, i, a)
                ).matrix[0]
                for a in range(1, 1 + REANCHOR_TRIES)
            ]
            cands = np.vstack([plan.anchors[i]] + redraws)
            cand_raw = evaluator(cands)
            seen_pts.append(cands)
            seen_vals.append(cand_raw)
            # the residual value at the anchor divides into the last
            # factor, so a weak anchor amplifies fit noise globally;
            # the planned anchor keeps priority unless it is far weaker
            # than a redraw
            score = np.abs(cand_raw - approx.evaluate(cands))
            boosted = score.copy()
            boosted[0] = score[0] / ANCHOR_PREFERENCE
            order = np.argsort(-boosted, kind="stable")
            term = None
            for idx in order:
                anchor = cands[idx]
                fibers = [
                    fiber_samples(
                        split, k, anchor, plan.fiber_counts[k], derive_seed(plan.seed, 1, k)
                    )
                    for k in range(split.r)
                ]
                raw = [evaluator(f.matrix) for f in fibers]
                values = [
                    rv - approx.evaluate(f.matrix) for rv, f in zip(raw, fibers)
                ]
                for rv, f in zip(raw, fibers):
                    seen_pts.append(f.matrix)
                    seen_vals.append(rv)
                try:
                    term = sparse_rank_one(split, anchor, fibers, values, lambda_stop)
                    break
                except DegenerateAnchorError:
                    continue
            if term is None:
                approx.stop_reason = "degenerate_anchor"
                break
        except BudgetExceededError:
            approx.stop_reason = "budget"
            break

        before = _rms(values[-1])
        after = _rms(values[-1] - term.evaluate(split, fibers[-1].matrix))
        approx.terms.append(term)
        approx.weights = np.append(approx.weights, 1.0)

        new_rms = _rms(term.evaluate(split, validation))
        cur_rms = _rms(approx.evaluate(validation))
        if new_rms == 0.0:
            eps = 0.0
        elif cur_rms == 0.0:
            eps = np.inf
        else:
            eps = new_rms / cur_rms
        approx.history.append(
            {"eps": eps, "fiber_rms_before": before, "fiber_rms_after": after}
        )
        if eps < tol:
            approx.stop_reason = "tolerance"
            break
        if i > 0 and new_rms > INFLATION_CAP * max(_rms(v) for v in values):
            # factors fit to noise-level residuals can multiply into a
            # term whose off-fiber mass dwarfs the residual it targets;
            # accepting one destroys the approximation globally
            approx.terms.pop()
            approx.weights = approx.weights[:-1]
            approx.stop_reason = "inflated_term"
            break
    if approx.terms:
        _reweight(approx, np.vstack(seen_pts), np.concatenate(seen_vals))
    return approx


def _reweight(approx, pts, vals):
    """Least-squares refit of the term weights on already-paid evaluations.

    Runs once after the greedy loop: refitting between terms would break
    the exact deflation algebra.  A term whose refit weight explodes only
    cancels on-fiber, so it is dropped and the rest refit.
    """
    while approx.terms:
        tmat = approx.term_values(pts)
        base = float(np.linalg.norm(vals - tmat @ approx.weights))
        beta, *_ = np.linalg.lstsq(tmat, vals, rcond=None)
        if not np.all(np.isfinite(beta)):
            return
        refit = float(np.linalg.norm(vals - tmat @ beta))
        if refit > base * (1.0 + 1e-12):
            return
        worst = int(np.argmax(np.abs(beta)))
        if len(approx.terms) > 1 and abs(beta[worst]) > INFLATION_CAP:
            del approx.terms[worst]
            approx.weights = np.delete(approx.weights, worst)
            continue
        approx.weights = beta
        return


def correct_weights(approx, samples, values):
    """Refit the term weights against validation data.

    A sparse regression on the term-evaluation matrix replaces the unit
    weights; if the refit cannot beat the current weights on the given
    data (rank-deficient term matrix, or a worse residual), the current
    weights are kept and the returned approximation is flagged in its
    ``notes``.
    """
    pts = np.asarray(samples, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    z = np.asarray(values, dtype=float).reshape(-1)
    m = approx.rank
    if pts.shape[0] < m:
        raise ValueError(f"need at least {m} validation evaluations, got {pts.shape[0]}")
    tmat = approx.term_values(pts)
    base_resid = np.linalg.norm(z - tmat @ approx.weights)

    live = [j for j in range(m) if np.any(tmat[:, j] != 0.0)]
    note = None
    beta = None
    if live:
        try:
            model = filars(tmat[:, live], z)
        except (ValueError, np.linalg.LinAlgError):
            note = "unit_weights_kept:rank_deficient"
        else:
            beta = np.zeros(m)
            beta[np.asarray(live, dtype=int)] = model.coeffs
    else:
        note = "unit_weights_kept:all_terms_zero"

    if beta is not None:
        new_resid = np.linalg.norm(z - tmat @ beta)
        if new_resid <= base_resid * (1.0 + 1e-12):
            note = "weights_corrected"
        else:
            beta = None
            note = "unit_weights_kept:no_improvement"
    if beta is None:
        beta = np.asarray(approx.weights, dtype=float).copy()
    return RankMApprox(
        split=approx.split,
        terms=list(approx.terms),
        weights=beta,
        stop_reason=approx.stop_reason,
        notes=approx.notes + (note,),
        history=list(approx.history),
    )


def hslrta(evaluator, split, ranks, fiber_counts, seed, tol=0.0, lambda_stop=None, budget=None):
    """Hierarchical sparse low-rank approximation along a linear tree.

    Level 1 separates the last coordinate group from the rest; each
    inner factor is made evaluable through deflated calls to the level
    above and decomposed recursively, bottoming out at a flat two-group
    rank-m fit.  ``ranks`` gives one rank per level (length ``r - 1``).
    On budget exhaustion the tree built so far is returned; achieved
    ranks are readable from the ``achieved_ranks`` property.
    """
    if split.r < 2:
        raise ValueError("hierarchical decomposition needs at least two groups")
    ranks = tuple(int(m) for m in ranks)
    if len(ranks) != split.r - 1:
        raise ValueError("one rank per level (r - 1 levels) is required")
    if any(m < 1 for m in ranks):
        raise ValueError("ranks must be >= 1")
    if isinstance(fiber_counts, int):
        fiber_counts = (fiber_counts,) * split.r
    fiber_counts = tuple(int(c) for c in fiber_counts)
    if len(fiber_counts) != split.r:
        raise ValueError("one fiber count per group is required")

    root = evaluator if isinstance(evaluator, CountingEvaluator) else CountingEvaluator(evaluator)
    if budget is not None:
        root = CountingEvaluator(root, budget)
    return _decompose(root, tuple(split.bases), ranks, fiber_counts, seed, tol, lambda_stop, 0)


def _decompose(func, bases, ranks, fiber_counts, seed, tol, lambda_stop, level):
    if len(bases) == 2:
        split = GroupSplit(bases=bases)
        plan = make_anchor_plan(split, ranks[0], fiber_counts, derive_seed(seed, level, 777))
        return sparse_rank_m(func, split, ranks[0], tol, plan, lambda_stop)

    split = GroupSplit(bases=bases)
    outer_basis = bases[-1]
    outer_slice = split.slices[-1]
    d_inner = split.dim - outer_basis.dim
    outer_coords = draw_samples(
        outer_basis.families, fiber_counts[-1], derive_seed(seed, level, 500)
    ).matrix
    outer_phi = design_matrix(outer_basis, outer_coords)

    pairs = []
    stop_reason = "max_rank"
    for i in range(ranks[0]):
        try:
            found = None
            for attempt in range(1 + REANCHOR_TRIES):
                anchor = draw_samples(
                    split.families, 1, derive_seed(seed, level, 10 + i, attempt)
                ).matrix[0]
                anchor_inner = anchor[:d_inner]
                anchor_outer = anchor[outer_slice]
                pts = np.tile(anchor, (outer_coords.shape[0], 1))
                pts[:, outer_slice] = outer_coords
                defl = func(pts)
                for inner_l, outer_l in pairs:
                    inner_at = inner_l.evaluate(anchor_inner.reshape(1, -1))[0]
                    defl = defl - inner_at * (outer_phi @ outer_l.coeffs)
                if _rms(defl) == 0.0:
                    stop_reason = "converged"
                    found = "converged"
                    break
                outer_model = filars(outer_phi, defl, lambda_stop=lambda_stop)
                fit_scale = _rms(outer_phi @ outer_model.coeffs)
                denom = float(
                    predict(outer_model, outer_basis, anchor_outer.reshape(1, -1))[0]
                )
                if fit_scale == 0.0 or abs(denom) < ANCHOR_RTOL * fit_scale:
                    continue
                found = (anchor_inner, anchor_outer, outer_model, denom)
                break
            if found == "converged":
                break
            if found is None:
                stop_reason = "degenerate_anchor"
                break
            anchor_inner, anchor_outer, outer_model, denom = found

            prev_pairs = list(pairs)

            def inner_func(points, _prev=prev_pairs, _out=anchor_outer, _den=denom):
                points = np.asarray(points, dtype=float)
                full = np.hstack([points, np.tile(_out, (points.shape[0], 1))])
                vals = func(full)
                for inner_l, outer_l in _prev:
                    outer_at = float(
                        predict(outer_l, outer_basis, _out.reshape(1, -1))[0]
                    )
                    vals = vals - outer_at * inner_l.evaluate(points)
                return vals / _den

            child = _decompose(
                inner_func,
                bases[:-1],
                ranks[1:],
                fiber_counts[:-1],
                derive_seed(seed, level, 20 + i),
                tol,
                lambda_stop,
                level + 1,
            )
            pairs.append((child, outer_model))
            if child.budget_exhausted:
                stop_reason = "budget"
                break
        except BudgetExceededError:
            stop_reason = "budget"
            break
    return HierApprox(bases=bases, pairs=pairs, stop_reason=stop_reason)


def _model_to_dict(model):
    support = np.asarray(model.support, dtype=int)
    return {
        "size": int(model.coeffs.shape[0]),
        "support": support.tolist(),
        "values": model.coeffs[support].tolist(),
        "lam": float(model.lam),
    }


def _model_from_dict(data):
    coeffs = np.zeros(int(data["size"]))
    support = np.asarray(data["support"], dtype=int)
    coeffs[support] = np.asarray(data["values"], dtype=float)
    return SparseModel(coeffs=coeffs, support=support, lam=float(data["lam"]))


def _basis_to_dict(basis):
    return {
        "families": [f.value for f in basis.families],
        "degree": int(basis.index_set.max_total_degree),
    }


def _basis_from_dict(data):
    families = [PolyFamily(tag) for tag in data["families"]]
    return total_degree_basis(families, len(families), int(data["degree"]))


def _approx_to_dict(approx):
    if isinstance(approx, RankMApprox):
        return {
            "kind": "rank_m",
            "bases": [_basis_to_dict(b) for b in approx.split.bases],
            "terms": [[_model_to_dict(f) for f in t.factors] for t in approx.terms],
            "weights": np.asarray(approx.weights, dtype=float).tolist(),
            "stop_reason": approx.stop_reason,
            "notes": list(approx.notes),
        }
    if isinstance(approx, HierApprox):
        return {
            "kind": "hier",
            "bases": [_basis_to_dict(b) for b in approx.bases],
            "pairs": [
                {"inner": _approx_to_dict(inner), "outer": _model_to_dict(outer)}
                for inner, outer in approx.pairs
            ],
            "stop_reason": approx.stop_reason,
        }
    raise TypeError(f"cannot serialize {type(approx).__name__}")


def _approx_from_dict(data):
    bases = tuple(_basis_from_dict(b) for b in data["bases"])
    if data["kind"] == "rank_m":
        split = GroupSplit(bases=bases)
        terms = [
            RankOneTerm(factors=tuple(_model_from_dict(f) for f in t))
            for t in data["terms"]
        ]
        return RankMApprox(
            split=split,
            terms=terms,
            weights=np.asarray(data["weights"], dtype=float),
            stop_reason=data.get("stop_reason", "max_rank"),
            notes=tuple(data.get("notes", ())),
        )
    if data["kind"] == "hier":
        pairs = [
            (_approx_from_dict(p["inner"]), _model_from_dict(p["outer"]))
            for p in data["pairs"]
        ]
        return HierApprox(
            bases=bases, pairs=pairs, stop_reason=data.get("stop_reason", "max_rank")
        )
    raise ValueError(f"unknown approximation kind {data['kind']!r}")


def save_approx(approx, path):
    """Write a flat or hierarchical approximation to a JSON file."""
    payload = {"format": FORMAT_NAME, "version": FORMAT_VERSION}
    payload.update(_approx_to_dict(approx))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def load_approx(path):
    """Read an approximation written by :func:`save_approx`."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} file: {path}")
    if payload.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {payload.get('version')!r}")
    return _approx_from_dict(payload)
