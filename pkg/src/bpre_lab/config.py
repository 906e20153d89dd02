"""Experiment configuration files.

A configuration is a YAML mapping. ``environment`` is either a list of atoms
``{a, p, weight}`` or ``{calibrate: {atoms: [{a, p}, ...], free, index, weights}}``
for an intermediately supercritical mixture solved by bisection. Each
experiment has its own required keys (see ``REQUIRED``); ``seed`` is always
required.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .environment import INTERMEDIATE, OTHER, STRONG, FiniteMixture, calibrate_intermediate
from .offspring_law import LinearFractionalLaw

EXPERIMENTS = (
    "regime-report", "exact-quenched", "strong-rate", "uniform-conditional",
    "strong-conditional-path", "intermediate-rate", "meander", "minimum-conditional",
    "theta-series", "early-minimum", "walk-fluctuation",
)

REQUIRED = {
    "regime-report": ("environment",),
    "exact-quenched": ("environment", "n"),
    "strong-rate": ("environment", "n_grid", "replicates"),
    "uniform-conditional": ("environment", "n", "c", "replicates"),
    "strong-conditional-path": ("environment", "n", "t", "z_max", "N", "replicates"),
    "intermediate-rate": ("environment", "n_grid", "replicates"),
    "meander": ("environment", "n", "replicates"),
    "minimum-conditional": ("environment", "n", "t", "z_max", "M", "replicates"),
    "theta-series": ("environment", "K", "M", "replicates"),
    "early-minimum": ("environment", "n", "m_grid", "z_values", "replicates"),
    "walk-fluctuation": ("n_grid", "replicates"),
}

KNOWN_KEYS = {
    "experiment", "environment", "regime", "seed", "replicates", "workers", "n", "n_grid",
    "c", "t", "t_pair", "z_max", "z_values", "m_grid", "N", "M", "B", "K", "path",
    "rhs_replicates", "increments", "renewal_x", "tolerances",
}

# keys that never influence numerical output and are left out of the config hash
NON_NUMERICAL = ("workers",)


class ConfigError(ValueError):
    """Every problem found in a configuration, one per entry of ``problems``."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    environment: FiniteMixture | None
    params: dict = field(default_factory=dict)
    regime: str | None = None
    workers: int | None = None
    raw: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.params.get(key, default)

    def __getitem__(self, key):
        return self.params[key]

    def config_hash(self) -> str:
        canonical = {k: v for k, v in self.raw.items() if k not in NON_NUMERICAL}
        blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_int(raw: dict, key: str, problems: list, minimum: int = 0) -> None:
    if key in raw and not (_is_int(raw[key]) and raw[key] >= minimum):
        problems.append(f"{key}: expected an integer >= {minimum}, got {raw[key]!r}")


def _check_int_list(raw: dict, key: str, problems: list, minimum: int = 0) -> None:
    if key not in raw:
        return
    v = raw[key]
    if not (isinstance(v, list) and v and all(_is_int(x) and x >= minimum for x in v)):
        problems.append(f"{key}: expected a nonempty list of integers >= {minimum}, got {v!r}")


def _parse_environment(spec, problems: list) -> FiniteMixture | None:
    try:
        if isinstance(spec, list):
            bad = [i for i, r in enumerate(spec)
                   if not (isinstance(r, dict) and {"a", "p", "weight"} <= set(r))]
            if bad or not spec:
                problems.append(f"environment: atoms {bad or '[]'} need keys a, p, weight")
                return None
            return FiniteMixture.from_records(spec)
        if isinstance(spec, dict) and "calibrate" in spec:
            cal = dict(spec["calibrate"])
            atoms = [LinearFractionalLaw(r["a"], r["p"]) for r in cal.pop("atoms")]
            return calibrate_intermediate(atoms, **cal)
    except (ValueError, KeyError, TypeError, ArithmeticError) as exc:
        problems.append(f"environment: {exc}")
        return None
    problems.append("environment: expected a list of {a, p, weight} or {calibrate: ...}")
    return None


def validate(raw: dict, experiment: str | None = None) -> ExperimentConfig:
    """Turn a parsed mapping into an :class:`ExperimentConfig` or raise :class:`ConfigError`."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a mapping"])
    raw = dict(raw)
    name = experiment or raw.get("experiment")
    if experiment and raw.get("experiment") not in (None, experiment):
        problems.append(f"experiment: config says {raw['experiment']!r} but {experiment!r} was requested")
    if name not in EXPERIMENTS:
        problems.append(f"experiment: unknown experiment {name!r}")
    raw["experiment"] = name
    unknown = sorted(set(raw) - KNOWN_KEYS)
    if unknown:
        problems.append(f"unknown keys: {', '.join(unknown)}")
    if "seed" not in raw:
        problems.append("seed: missing (a seed is mandatory)")
    elif not (_is_int(raw["seed"]) and raw["seed"] >= 0):
        problems.append(f"seed: expected a nonnegative integer, got {raw['seed']!r}")
    for key in REQUIRED.get(name, ()):
        if key not in raw:
            problems.append(f"{key}: missing (required by {name})")
    for key in ("replicates", "n", "c", "z_max", "N", "M", "K", "rhs_replicates"):
        _check_int(raw, key, problems, minimum=1)
    _check_int(raw, "B", problems, minimum=0)
    _check_int(raw, "workers", problems, minimum=1)
    _check_int_list(raw, "n_grid", problems, minimum=1)
    _check_int_list(raw, "m_grid", problems, minimum=0)
    _check_int_list(raw, "z_values", problems, minimum=1)
    if "path" in raw and not (isinstance(raw["path"], list) and all(_is_int(i) and i >= 0 for i in raw["path"])):
        problems.append("path: expected a list of atom indices")
    for key in ("t",):
        if key in raw and not (_is_num(raw[key]) and 0 < raw[key] < 1):
            problems.append(f"{key}: expected a number in (0, 1), got {raw[key]!r}")
    if "t_pair" in raw:
        tp = raw["t_pair"]
        if not (isinstance(tp, list) and len(tp) == 2 and all(_is_num(x) and 0 < x < 1 for x in tp)):
            problems.append(f"t_pair: expected two numbers in (0, 1), got {tp!r}")
    if raw.get("regime") not in (None, STRONG, INTERMEDIATE, OTHER):
        problems.append(f"regime: expected one of {STRONG}, {INTERMEDIATE}, {OTHER}")
    if raw.get("increments", "normal") not in ("normal", "environment"):
        problems.append("increments: expected 'normal' or 'environment'")
    if "tolerances" in raw and not (isinstance(raw["tolerances"], dict)
                                    and all(_is_num(v) for v in raw["tolerances"].values())):
        problems.append("tolerances: expected a mapping of names to numbers")
    if name == "walk-fluctuation" and raw.get("increments") == "environment" and "environment" not in raw:
        problems.append("environment: missing (required for environment increments)")
    if "renewal_x" in raw:
        rx = raw["renewal_x"]
        if not (isinstance(rx, list) and all(_is_num(x) for x in rx)):
            problems.append("renewal_x: expected a list of numbers")
        if "K" not in raw:
            problems.append("K: missing (renewal truncation needed by renewal_x)")

    env = _parse_environment(raw["environment"], problems) if "environment" in raw else None
    if env is not None and "path" in raw and any(i >= len(env.atoms) for i in raw["path"]):
        problems.append("path: atom index out of range")
    if problems:
        raise ConfigError(problems)
    params = {k: v for k, v in raw.items()
              if k not in ("experiment", "environment", "seed", "regime", "workers")}
    return ExperimentConfig(name, int(raw["seed"]), env, params, raw.get("regime"),
                            raw.get("workers"), raw)


def load_config(path, experiment: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read YAML from ``path``, apply command-line ``overrides`` and validate."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"config: invalid YAML: {exc}"]) from exc
    if raw is None:
        raw = {}
    if isinstance(raw, dict):
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate(raw, experiment)
