"""Command-line experiment runner.

    bpre-lab run <experiment> --config cfg.yaml --out results.json
        [--seed N] [--replicates N] [--workers N] [--format csv|structured]

Exit codes: 0 when every hard check passed, 1 when a check failed (the failing
invariants are named on stderr), 2 for configuration errors.

CSV output starts with ``#`` metadata lines followed by a header with the
fixed column order in ``CSV_COLUMNS``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import EXPERIMENTS, ConfigError, ExperimentConfig, load_config
from .environment import regime_report
from .fluctuation import (InfeasibleConditioning, normal_increments, prob_min_nonneg,
                          renewal_u, sparre_andersen)
from .montecarlo import Estimate
from .quenched import (EnvPath, MarkovBoundViolation, log_prob_eq, quenched_law,
                       sub_path_gen_fn)

CSV_COLUMNS = ("experiment", "quantity", "n", "k", "t", "z", "m", "x", "value", "stderr",
               "replicates", "effective_sample_size", "log_value")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def package_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


class Result:
    """Experiment output: named checks, flat rows and a structured payload."""

    def __init__(self, checks: dict, rows: list[dict], payload: dict):
        self.checks = {k: bool(v) for k, v in checks.items()}
        self.rows = rows
        self.payload = payload

    @classmethod
    def from_report(cls, report: ex.Report) -> "Result":
        return cls(report.checks, report.rows(), report.to_dict())

    @property
    def failed(self) -> list[str]:
        return [k for k, ok in self.checks.items() if not ok]


def _tol(cfg: ExperimentConfig, name: str, default: float) -> float:
    return float((cfg.get("tolerances") or {}).get(name, default))


def _check_regime(cfg: ExperimentConfig) -> None:
    if cfg.regime is not None and cfg.environment is not None:
        found = regime_report(cfg.environment).regime
        if found != cfg.regime:
            raise ex.RegimeMismatch(f"environment is {found!r}, config expects {cfg.regime!r}")


def _run_regime_report(cfg, workers):
    rep = regime_report(cfg.environment)
    row = {"quantity": "gamma", "value": rep.gamma, "stderr": rep.stderr}
    return Result({}, [row, {"quantity": "drift_tilted", "value": rep.drift_tilted},
                       {"quantity": "variance_tilted", "value": rep.variance_tilted}],
                  {**rep.to_dict(), "environment": cfg.environment.to_records()})


def _run_exact_quenched(cfg, workers):
    env, n = cfg.environment, cfg["n"]
    if "path" in cfg.params:
        idx = list(cfg["path"])
        if len(idx) != n:
            raise ConfigError([f"path: length {len(idx)} does not match n = {n}"])
    elif len(env.atoms) == 1:
        idx = [0] * n
    else:
        idx = env.sample_indices(np.random.default_rng(cfg.seed), n).tolist()
    path = EnvPath.from_laws([env.atoms[i] for i in idx])
    ql = quenched_law(path)
    gap = abs(ql.survival - (1.0 - sub_path_gen_fn(path, 0, n, 0.0)))
    rows = [{"quantity": "survival", "n": n, "value": ql.survival},
            {"quantity": "extinction", "n": n, "value": ql.extinction},
            {"quantity": "mean", "n": n, "log_value": -ql.log_e_sn,
             "value": math.exp(-ql.log_e_sn) if -ql.log_e_sn < 709 else math.inf}]
    if n >= 1:
        rows.append({"quantity": "h", "n": n, "value": ql.h})
        for z in range(1, cfg.get("z_max", 5) + 1):
            lp = log_prob_eq(ql, z)
            rows.append({"quantity": "prob_eq", "n": n, "z": z, "value": math.exp(lp),
                         "log_value": lp})
    payload = {"path": idx, "survival": ql.survival, "extinction": ql.extinction,
               "h": ql.h, "log_survival": ql.log_survival, "generating_function_gap": gap}
    return Result({"survival_matches_generating_function": gap < 1e-12}, rows, payload)


def _run_strong_rate(cfg, workers):
    return Result.from_report(ex.check_strong_rate(
        cfg.environment, cfg["n_grid"], cfg["replicates"], cfg.seed, workers))


def _run_uniform(cfg, workers):
    return Result.from_report(ex.check_uniform_conditional(
        cfg.environment, cfg["n"], cfg["c"], cfg["replicates"], cfg.seed, workers,
        tol=_tol(cfg, "uniform", 0.03)))


def _run_strong_path(cfg, workers):
    return Result.from_report(ex.check_strong_conditional_path(
        cfg.environment, cfg["n"], cfg["t"], cfg["z_max"], cfg["N"], cfg["replicates"],
        cfg.seed, workers, tol=_tol(cfg, "tv", 0.05), t_pair=cfg.get("t_pair")))


def _run_intermediate_rate(cfg, workers):
    return Result.from_report(ex.check_intermediate_rate(
        cfg.environment, cfg["n_grid"], cfg["replicates"], cfg.seed, workers))


def _run_meander(cfg, workers):
    return Result.from_report(ex.check_meander(
        cfg.environment, cfg["n"], cfg["replicates"], cfg.seed, workers,
        ks_tol=_tol(cfg, "ks", 0.05), negative_tol=_tol(cfg, "negative_mass", 0.02)))


def _run_minimum(cfg, workers):
    return Result.from_report(ex.check_minimum_conditional(
        cfg.environment, cfg["n"], cfg["t"], cfg["z_max"], cfg["M"], cfg["replicates"],
        cfg.seed, rhs_replicates=cfg.get("rhs_replicates"), extension=cfg.get("B"),
        workers=workers, tol=_tol(cfg, "tv", 0.07), t_pair=cfg.get("t_pair")))


def _run_theta(cfg, workers):
    return Result.from_report(ex.estimate_theta_series(
        cfg.environment, cfg["K"], cfg["M"], cfg["replicates"], cfg.seed,
        extension=cfg.get("B"), workers=workers))


def _run_early(cfg, workers):
    return Result.from_report(ex.check_early_minimum(
        cfg.environment, cfg["n"], cfg["z_values"], cfg["m_grid"], cfg["replicates"],
        cfg.seed, workers))


def _run_walk(cfg, workers):
    if cfg.get("increments", "normal") == "environment":
        sampler = cfg.environment.tilt().increment_sampler()
        oracle = None
    else:
        sampler, oracle = normal_increments, sparre_andersen
    rows, checks, payload = [], {}, {"prob_min_nonneg": {}, "renewal": {}}
    for n in cfg["n_grid"]:
        est = prob_min_nonneg(sampler, n, cfg["replicates"], cfg.seed, workers)
        row = {"quantity": "prob_min_nonneg", "n": n, "value": est.value,
               "stderr": est.stderr, "replicates": est.replicates}
        rows.append(row)
        entry = est.to_dict()
        if oracle is not None:
            exact = oracle(n)
            entry["exact"] = exact
            checks[f"sparre_andersen_n{n}"] = est.within(exact, _tol(cfg, "n_se", 4.0))
            rows.append({"quantity": "sparre_andersen", "n": n, "value": exact, "stderr": 0.0})
        payload["prob_min_nonneg"][str(n)] = entry
    for x in cfg.get("renewal_x", []) or []:
        ren = renewal_u(sampler, x, cfg["K"], cfg["replicates"], cfg.seed, workers)
        rows.append({"quantity": "renewal_u", "k": cfg["K"], "x": float(x), "value": ren.u_hat,
                     "stderr": ren.stderr, "replicates": ren.replicates})
        payload["renewal"][repr(float(x))] = ren.__dict__
    return Result(checks, rows, payload)


RUNNERS = {
    "regime-report": _run_regime_report,
    "exact-quenched": _run_exact_quenched,
    "strong-rate": _run_strong_rate,
    "uniform-conditional": _run_uniform,
    "strong-conditional-path": _run_strong_path,
    "intermediate-rate": _run_intermediate_rate,
    "meander": _run_meander,
    "minimum-conditional": _run_minimum,
    "theta-series": _run_theta,
    "early-minimum": _run_early,
    "walk-fluctuation": _run_walk,
}
assert set(RUNNERS) == set(EXPERIMENTS)


def _metadata(cfg: ExperimentConfig) -> dict:
    return {"experiment": cfg.experiment, "config_hash": cfg.config_hash(), "seed": cfg.seed,
            "version": package_version(),
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def render_csv(cfg: ExperimentConfig, result: Result) -> str:
    buf = io.StringIO()
    meta = _metadata(cfg)
    for key in ("config_hash", "seed", "version", "timestamp"):
        buf.write(f"# {key}: {meta[key]}\n")
    buf.write(f"# checks: {json.dumps(result.checks, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in result.rows:
        full = {"experiment": cfg.experiment, **row}
        writer.writerow([_cell(full.get(col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return _json_safe(float(value))
    if isinstance(value, Estimate):
        return _json_safe(value.to_dict())
    return value


def render_structured(cfg: ExperimentConfig, result: Result) -> str:
    doc = {"metadata": _metadata(cfg),
           "config": {k: v for k, v in cfg.raw.items() if k != "workers"},
           "environment": cfg.environment.to_records() if cfg.environment else None,
           "checks": result.checks, "passed": not result.failed,
           "rows": result.rows, "result": result.payload}
    return json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n"


def emit_results(cfg: ExperimentConfig, result: Result, out: Path, fmt: str) -> None:
    text = render_csv(cfg, result) if fmt == "csv" else render_structured(cfg, result)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> Result:
    _check_regime(cfg)
    return RUNNERS[cfg.experiment](cfg, workers)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpre-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--seed", type=int)
    run.add_argument("--replicates", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--format", choices=("csv", "structured"), default="structured")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, args.experiment,
                          {"seed": args.seed, "replicates": args.replicates})
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    workers = args.workers if args.workers is not None else cfg.workers
    try:
        result = run_experiment(cfg, workers)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.RegimeMismatch as exc:
        result = Result({"regime": False}, [], {"error": str(exc)})
    except MarkovBoundViolation as exc:
        result = Result({"markov_bound": False}, [], {"error": str(exc)})
    except InfeasibleConditioning as exc:
        result = Result({"conditioning_feasible": False}, [], {"error": str(exc)})
    except FloatingPointError as exc:
        result = Result({"finite_values": False}, [], {"error": str(exc)})
    try:
        emit_results(cfg, result, args.out, args.format)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAILED
    if result.failed:
        print(f"{cfg.experiment}: FAILED {', '.join(result.failed)} -> {args.out}", file=sys.stderr)
        return EXIT_FAILED
    print(f"{cfg.experiment}: ok ({len(result.checks)} checks) -> {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
