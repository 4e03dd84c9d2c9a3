"""Experiment configuration: flat key=value files, validation, hashing.

A config file holds one ``key = value`` pair per line; blank lines and
``#`` comments are ignored.  Every knob has a zero/empty sentinel that
means "use the experiment's default", so a minimal file only needs the
``experiment`` tag.  The hash covers every field except the output
location, making result rows traceable to the exact settings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace


class ConfigError(Exception):
    """Invalid experiment configuration (bad file, key, or value)."""


EXPERIMENTS = ("rastrigin", "sepfun", "elliptic")

METHODS = {
    "rastrigin": ("OLS", "OMP", "ILARS", "FILARS", "HSLRTA"),
    "sepfun": ("NVS", "NVS+FILARS"),
    "elliptic": ("NVS", "NVS+HSLRTA"),
}

STAGES = ("offline", "online", "all")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = ""
    method: str = ""  # empty runs the experiment's default set
    degree: int = 0
    train: int = 0
    test: int = 0
    grid: int = 0
    kl_dims: int = 32
    candidates: int = 500
    terms: int = 0
    groups: tuple = ()
    ranks: tuple = ()
    fibers: int = 0
    budget: int = 0
    tol: float = 0.0
    seed: int = 0
    timing_reps: int = 5
    stage: str = "all"
    out: str = "results"


_COUNT_FIELDS = (
    "degree",
    "train",
    "test",
    "grid",
    "kl_dims",
    "candidates",
    "terms",
    "fibers",
    "budget",
    "timing_reps",
)


def _parse_value(name, kind, raw):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            if not raw:
                return ()
            return tuple(int(part) for part in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def validate(cfg):
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {cfg.experiment!r}; expected one of {EXPERIMENTS}"
        )
    if cfg.method and cfg.method not in METHODS[cfg.experiment]:
        raise ConfigError(
            f"method {cfg.method!r} is not valid for {cfg.experiment}; "
            f"choose from {METHODS[cfg.experiment]}"
        )
    if cfg.stage not in STAGES:
        raise ConfigError(f"unknown stage {cfg.stage!r}; expected one of {STAGES}")
    for name in _COUNT_FIELDS:
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    if any(g < 1 for g in cfg.groups) or any(r < 1 for r in cfg.ranks):
        raise ConfigError("groups and ranks entries must be positive")
    if cfg.tol < 0.0:
        raise ConfigError(f"tol must be non-negative, got {cfg.tol}")
    if cfg.timing_reps == 0:
        raise ConfigError("timing_reps must be positive")
    return cfg


def read_config(path, **overrides):
    """Parse a key=value config file; keyword overrides win over the file."""
    types = {f.name: type(f.default) for f in fields(ExperimentConfig)}
    values = {}
    unknown = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {text!r}")
            key, raw = text.split("=", 1)
            key = key.strip()
            if key not in types:
                unknown.append(key)
                continue
            values[key] = _parse_value(key, types[key], raw)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return validate(ExperimentConfig(**values))


def write_config(cfg, path):
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def config_hash(cfg):
    """Hex digest over every field except the output location."""
    parts = []
    for f in fields(ExperimentConfig):
        if f.name == "out":
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        parts.append(f"{f.name}={value}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:12]


def with_defaults(cfg, **defaults):
    """Fill zero/empty sentinel fields from the experiment's defaults."""
    updates = {}
    for name, value in defaults.items():
        current = getattr(cfg, name)
        if current == 0 or current == "" or current == ():
            updates[name] = value
    return replace(cfg, **updates) if updates else cfg
