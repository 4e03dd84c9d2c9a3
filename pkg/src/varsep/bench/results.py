"""Result rows, CSV persistence, and histogram post-processing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

HEADER = (
    "experiment",
    "method",
    "p",
    "M",
    "N_terms",
    "epsilon",
    "offline_s",
    "online_s_per_sample",
    "evals",
    "seed",
    "config_hash",
)


@dataclass(frozen=True)
class ResultRecord:
    experiment: str
    method: str
    p: int
    M: int
    N_terms: int
    epsilon: float
    offline_s: float
    online_s_per_sample: float
    evals: int
    seed: int
    config_hash: str


def write_results(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for rec in records:
            row = []
            for f in fields(ResultRecord):
                value = getattr(rec, f.name)
                row.append(repr(value) if isinstance(value, float) else value)
            writer.writerow(row)


def read_results(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != HEADER:
            raise ValueError(f"unexpected results header: {header}")
        for row in reader:
            kwargs = {}
            for f, cell in zip(fields(ResultRecord), row):
                if f.type in ("int", int):
                    kwargs[f.name] = int(cell)
                elif f.type in ("float", float):
                    kwargs[f.name] = float(cell)
                else:
                    kwargs[f.name] = cell
            records.append(ResultRecord(**kwargs))
    return records


def density_estimate(values, bins):
    """Normalized histogram as rows of (left edge, right edge, density)."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("cannot estimate a density from no values")
    density, edges = np.histogram(values, bins=int(bins), density=True)
    return np.column_stack([edges[:-1], edges[1:], density])


def write_table(path, header, rows):
    """Plain CSV writer for auxiliary tables (curves, fields, densities)."""
    rows = np.asarray(rows, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in np.atleast_2d(rows):
            writer.writerow([repr(float(v)) for v in row])
