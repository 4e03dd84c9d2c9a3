"""Orthonormal polynomial bases, multi-index sets and design matrices.

Each univariate family is normalized against the sampling density it is
paired with: Legendre polynomials against the uniform density on
``[-1, 1]``, probabilists' Hermite polynomials against the standard
normal density.  Multivariate bases are tensor products truncated to a
total-degree set in graded lexicographic order, so coefficient vectors
are comparable across runs and implementations.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

INDEX_CAP = 2_000_000


class BasisSizeError(ValueError):
    """The requested multi-index set exceeds the cardinality cap."""


class PolyFamily(enum.Enum):
    """Univariate orthonormal family tag, tied to its sampling density."""

    LEGENDRE_UNIFORM = "legendre"
    HERMITE_GAUSSIAN = "hermite"


def families_from_tag(tag, dim):
    """Map a distribution tag ('uniform' or 'normal') to a family tuple."""
    if tag == "uniform":
        return (PolyFamily.LEGENDRE_UNIFORM,) * dim
    if tag == "normal":
        return (PolyFamily.HERMITE_GAUSSIAN,) * dim
    raise ValueError(f"unknown distribution tag {tag!r}")


def eval_poly1d_table(family, max_degree, x):
    """Values of the orthonormal polynomials of degree 0..max_degree.

    Parameters
    ----------
    family : PolyFamily
    max_degree : int
    x : array_like

    Returns
    -------
    ndarray of shape ``x.shape + (max_degree + 1,)``.

    The normalized three-term recurrence is used directly, which is
    stable far beyond degree 30 for both families.
    """
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (max_degree + 1,))
    out[..., 0] = 1.0
    if max_degree == 0:
        return out
    if family is PolyFamily.LEGENDRE_UNIFORM:
        out[..., 1] = math.sqrt(3.0) * x
        for n in range(1, max_degree):
            a = math.sqrt(2 * n + 3) / (n + 1)
            out[..., n + 1] = a * (
                math.sqrt(2 * n + 1) * x * out[..., n]
                - n / math.sqrt(2 * n - 1) * out[..., n - 1]
            )
    elif family is PolyFamily.HERMITE_GAUSSIAN:
        out[..., 1] = x
        for n in range(1, max_degree):
            out[..., n + 1] = (x * out[..., n] - math.sqrt(n) * out[..., n - 1]) / math.sqrt(n + 1)
    else:
        raise ValueError(f"unknown polynomial family {family!r}")
    return out


def eval_poly1d(family, degree, x):
    """Value of the degree-``degree`` orthonormal polynomial at ``x``."""
    table = eval_poly1d_table(family, degree, x)
    value = table[..., degree]
    if value.ndim == 0:
        return float(value)
    return value


@dataclass(frozen=True)
class MultiIndexSet:
    """Total-degree multi-index set in graded lexicographic order."""

    dim: int
    max_total_degree: int
    indices: np.ndarray  # (cardinality, dim) integer array

    def __len__(self):
        return self.indices.shape[0]


def _fixed_degree_indices(dim, total, memo):
    # all dim-tuples of nonnegative ints summing to `total`, lexicographic
    # in the leading coordinate (ascending)
    key = (dim, total)
    cached = memo.get(key)
    if cached is not None:
        return cached
    if dim == 1:
        block = np.array([[total]], dtype=np.int64)
    else:
        parts = []
        for lead in range(total + 1):
            tail = _fixed_degree_indices(dim - 1, total - lead, memo)
            head = np.full((tail.shape[0], 1), lead, dtype=np.int64)
            parts.append(np.hstack([head, tail]))
        block = np.vstack(parts)
    memo[key] = block
    return block


def total_degree_set(dim, degree, cap=INDEX_CAP):
    """All multi-indices of total degree <= ``degree`` in ``dim`` variables.

    Cardinality is binomial(dim + degree, dim); requests above ``cap``
    raise :class:`BasisSizeError` before any allocation happens.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if degree < 0:
        raise ValueError("degree must be >= 0")
    cardinality = math.comb(dim + degree, dim)
    if cardinality > cap:
        raise BasisSizeError(
            f"total-degree set of dimension {dim}, degree {degree} has "
            f"{cardinality} indices, above the cap {cap}"
        )
    memo = {}
    blocks = [_fixed_degree_indices(dim, t, memo) for t in range(degree + 1)]
    indices = np.vstack(blocks)
    indices.setflags(write=False)
    return MultiIndexSet(dim=dim, max_total_degree=degree, indices=indices)


@dataclass(frozen=True)
class SampleSet:
    """Parameter samples together with the seed that produced them."""

    matrix: np.ndarray  # (count, dim)
    seed: int
    families: tuple

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


def draw_samples(families, count, seed):
    """Draw ``count`` independent samples of the product distribution.

    ``families`` lists one :class:`PolyFamily` per coordinate; Legendre
    coordinates are uniform on [-1, 1], Hermite coordinates standard
    normal.  Columns are generated one at a time so results do not
    depend on how mixed the family list is.
    """
    families = tuple(families)
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    cols = []
    for fam in families:
        if fam is PolyFamily.LEGENDRE_UNIFORM:
            cols.append(rng.uniform(-1.0, 1.0, count))
        elif fam is PolyFamily.HERMITE_GAUSSIAN:
            cols.append(rng.standard_normal(count))
        else:
            raise ValueError(f"unknown polynomial family {fam!r}")
    return SampleSet(matrix=np.column_stack(cols), seed=seed, families=families)


@dataclass(frozen=True)
class Basis:
    """Tensor-product orthonormal basis restricted to a multi-index set."""

    families: tuple
    index_set: MultiIndexSet

    def __post_init__(self):
        if len(self.families) != self.index_set.dim:
            raise ValueError("one family per coordinate is required")

    @property
    def dim(self):
        return self.index_set.dim

    @property
    def size(self):
        return len(self.index_set)


def total_degree_basis(family, dim, degree, cap=INDEX_CAP):
    """Build a total-degree basis; ``family`` is a tag or one tag per dim."""
    if isinstance(family, PolyFamily):
        families = (family,) * dim
    else:
        families = tuple(family)
        if len(families) != dim:
            raise ValueError("family list length must equal dim")
    return Basis(families=families, index_set=total_degree_set(dim, degree, cap))


def _points_of(samples):
    pts = samples.matrix if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    return pts


def design_columns(basis, samples, columns):
    """Design-matrix columns for the given basis-function indices only."""
    pts = _points_of(samples)
    if pts.shape[1] != basis.dim:
        raise ValueError(
            f"samples have dimension {pts.shape[1]}, basis expects {basis.dim}"
        )
    idx = basis.index_set.indices[np.asarray(columns, dtype=int)]
    out = np.ones((pts.shape[0], idx.shape[0]))
    for j in range(basis.dim):
        degs = idx[:, j]
        top = int(degs.max()) if degs.size else 0
        table = eval_poly1d_table(basis.families[j], top, pts[:, j])
        out *= table[:, degs]
    return out


def design_matrix(basis, samples):
    """Evaluate every basis function at every sample; shape (count, size)."""
    return design_columns(basis, samples, np.arange(basis.size))
