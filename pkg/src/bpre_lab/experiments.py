"""Importance-sampling estimators and executable limit-theorem checks.

Every annealed quantity is written as ``gamma**n`` times an expectation under
the tilted environment of a closed-form quenched functional, so rare events
such as ``{Z_n = 1}`` are never simulated directly. Conditional laws given
``{Z_n = 1}`` are ratios of such expectations over common paths, with
delta-method standard errors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .environment import (INTERMEDIATE, STRONG, FiniteMixture, TiltedEnvironment,
                          regime_report)
from .fluctuation import first_min_index, sample_conditioned_nonneg, stays_nonneg
from .montecarlo import (Estimate, MomentAccumulator, accumulate_blocks,
                         effective_sample_size, map_blocks, sum_blocks)
from .offspring_law import LinearFractionalLaw
from .quenched import BatchQuenched, EnvPath, PathBatch, quenched_law


class RegimeMismatch(ValueError):
    """The environment is not in the regime a check is about."""


def block_size_for(n: int) -> int:
    """Replicates per block: about four million path entries, a power of two."""
    target = 2 ** 22 // (n + 1)
    return int(min(16384, max(1024, 2 ** int(math.log2(max(target, 1))))))


def _prepare(env, *regimes: str) -> tuple[FiniteMixture, TiltedEnvironment]:
    if isinstance(env, TiltedEnvironment):
        base, tilted = env.base, env
    else:
        base, tilted = env, env.tilt()
    if regimes:
        found = regime_report(base).regime
        if found not in regimes:
            raise RegimeMismatch(f"environment is {found!r}, expected one of {regimes}")
    return base, tilted


def _xlogy_power(log_base: np.ndarray, power) -> np.ndarray:
    """``power * log_base`` with ``0 * (-inf)`` read as 0."""
    power = np.asarray(power, dtype=float)
    with np.errstate(invalid="ignore"):
        out = power * log_base
    return np.where(power == 0, 0.0, out)


@dataclass
class ConditionalDistribution:
    support: np.ndarray
    masses: np.ndarray
    stderr: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_ratios(cls, acc: MomentAccumulator, num_cols: Sequence[int], den_col: int,
                    support, **diagnostics) -> "ConditionalDistribution":
        masses, errs = [], []
        for col in num_cols:
            num = np.zeros(acc.dim)
            den = np.zeros(acc.dim)
            num[col] = 1.0
            den[den_col] = 1.0
            v, e = acc.ratio(num, den)
            masses.append(v)
            errs.append(e)
        return cls(np.asarray(support), np.array(masses), np.array(errs), dict(diagnostics))

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def rows(self) -> list[dict]:
        return [{"z": int(z), "value": float(m), "stderr": float(e)}
                for z, m, e in zip(self.support, self.masses, self.stderr)]

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "masses": self.masses.tolist(),
                "stderr": self.stderr.tolist(), "diagnostics": self.diagnostics}


def tv_distance(p: ConditionalDistribution, q: ConditionalDistribution) -> tuple[float, float]:
    """Total variation over the shared support and a combined standard error.

    The error is ``0.5 * sum_z sqrt(se_p**2 + se_q**2)``, which bounds the
    expected contribution of sampling noise to the distance.
    """
    if not np.array_equal(p.support, q.support):
        raise ValueError("distributions must share their support")
    tv = 0.5 * float(np.abs(p.masses - q.masses).sum())
    se = 0.5 * float(np.sqrt(p.stderr ** 2 + q.stderr ** 2).sum())
    return tv, se


@dataclass
class Report:
    """Base for check results; ``checks`` holds the named hard assertions."""

    experiment: str = ""
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def failed(self) -> list[str]:
        return [name for name, ok in self.checks.items() if not ok]

    def to_dict(self) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            out[key] = _jsonable(value)
        return out

    def rows(self) -> list[dict]:
        return []


def _jsonable(value):
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def _est_row(quantity: str, est: Estimate, **params) -> dict:
    return {"quantity": quantity, **params, "value": est.value, "stderr": est.stderr,
            "replicates": est.replicates, "effective_sample_size": est.effective_sample_size,
            "log_value": est.log_value}


def _dist_rows(quantity: str, dist: ConditionalDistribution, replicates: int, **params) -> list[dict]:
    return [{"quantity": quantity, **params, **row, "replicates": replicates} for row in dist.rows()]


# --------------------------------------------------------------------------- #
# primitives

def _ess(count: int, mean_w: float, mean_w2: float) -> float:
    return float(count * mean_w ** 2 / mean_w2) if mean_w2 > 0 else 0.0


def tilted_expectation(tilted: TiltedEnvironment, n: int,
                       functional: Callable, replicates: int, seed: int,
                       condition_nonneg: bool = False, per_path: bool = False,
                       workers: int | None = None, tag: int = 301) -> Estimate:
    """Average a path functional over environments drawn from the tilted measure.

    ``functional`` maps a :class:`BatchQuenched` to one value per path, or an
    :class:`EnvPath` to a float when ``per_path`` is set. With
    ``condition_nonneg`` the average is over paths with ``min(S_1..S_n) >= 0``.
    In ``snis`` mode the base-sampler paths are self-normalized by ``exp(-S_n)``.
    """
    snis = tilted.mode == "snis"

    def block(rng, size):
        batch, log_w = tilted.sample_weighted_batch(rng, size, n)
        if per_path:
            values = np.array([functional(batch.path(i)) for i in range(size)], dtype=float)
        else:
            values = np.asarray(functional(BatchQuenched(batch)), dtype=float)
        bad = ~np.isfinite(values)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise FloatingPointError(
                f"non-finite functional value {values[i]} on path a={batch.a[i].tolist()}, "
                f"p={batch.p[i].tolist()}")
        w = np.exp(log_w) if snis else np.ones(size)
        if condition_nonneg:
            w = w * stays_nonneg(batch.s)
        return np.column_stack([w * values, w, w * w])

    acc = accumulate_blocks(block, 3, replicates, seed, tag=tag, workers=workers,
                            block_size=block_size_for(n))
    if snis or condition_nonneg:
        value, se = acc.ratio([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
        est = Estimate(value, se, acc.count, seed,
                       effective_sample_size=_ess(acc.count, acc.mean[1], acc.mean[2]))
        if snis:
            est.diagnostics["self_normalized"] = True
        if condition_nonneg:
            est.diagnostics["conditioning_rate"] = float(acc.mean[1])
        return est
    return acc.estimate(0, seed)


def annealed_point_probs(env, n: int, zs: Sequence[int], replicates: int, seed: int,
                         workers: int | None = None, tag: int = 302) -> list[Estimate]:
    """``P(Z_n = z) = gamma**n E_tilted[P(Z_n > 0 | env)**2 H_n**(z - 1)]`` for each ``z``.

    One set of paths serves all ``z``. ``log_value`` stays authoritative when
    ``gamma**n`` underflows.
    """
    zs = np.asarray(zs, dtype=int)
    if np.any(zs < 1):
        raise ValueError("z must be >= 1")
    if n < 1:
        raise ValueError("n must be >= 1")
    _, tilted = _prepare(env)
    log_gn = n * math.log(tilted.gamma)
    snis = tilted.mode == "snis"
    k = len(zs)

    def block(rng, size):
        batch, log_w = tilted.sample_weighted_batch(rng, size, n)
        vals = np.exp(BatchQuenched(batch).log_scaled_prob_eq(zs))
        if not snis:
            return vals
        w = np.exp(log_w)
        return np.column_stack([vals * w[:, None], w, w * w])

    acc = accumulate_blocks(block, k + 2 if snis else k, replicates, seed, tag=tag,
                            workers=workers, block_size=block_size_for(n))
    ess = _ess(acc.count, acc.mean[k], acc.mean[k + 1]) if snis else float(acc.count)
    out = []
    for i, z in enumerate(zs):
        if snis:
            num = np.zeros(k + 2)
            den = np.zeros(k + 2)
            num[i], den[k] = 1.0, 1.0
            mean, se = acc.ratio(num, den)
        else:
            mean, se = float(acc.mean[i]), float(acc.stderr[i])
        log_value = log_gn + math.log(mean) if mean > 0 else -math.inf
        out.append(Estimate(math.exp(log_value), math.exp(log_gn) * se, acc.count, seed,
                            effective_sample_size=ess,
                            diagnostics={"n": n, "z": int(z), "tilted_mean": mean,
                                         "tilted_stderr": se, "self_normalized": snis},
                            log_value=log_value))
    return out


def annealed_point_prob(env, n: int, z: int, replicates: int, seed: int,
                        workers: int | None = None) -> Estimate:
    return annealed_point_probs(env, n, [z], replicates, seed, workers)[0]


def exact_annealed_point_prob(env: FiniteMixture, n: int, zs: Sequence[int]) -> np.ndarray:
    """Enumerate every environment word of length ``n`` (small ``n`` only).

    Each word gets its tilted weight times ``gamma**n`` times
    ``exp(S_n) P(Z_n = z | word)``.
    """
    tilted = env.tilt()
    w = np.array(tilted.weights)
    zs = np.asarray(zs, dtype=int)
    total = np.zeros(len(zs))
    for word in itertools.product(range(len(env.atoms)), repeat=n):
        path = EnvPath.from_laws([env.atoms[i] for i in word])
        ql = quenched_law(path)
        scaled = np.exp(2 * ql.log_survival + (zs - 1) * ql.log_h)
        total += np.prod(w[list(word)]) * scaled
    return tilted.gamma ** n * total


def fixed_point_extinction(law: LinearFractionalLaw, tol: float = 1e-15,
                           max_iter: int = 100_000) -> float:
    """Smallest fixed point of the generating function, by iterating from 0."""
    s = 0.0
    for _ in range(max_iter):
        nxt = law.gen_fn(s)
        if abs(nxt - s) < tol:
            return nxt
        s = nxt
    return s


# --------------------------------------------------------------------------- #
# strongly supercritical regime

@dataclass
class StrongRateReport(Report):
    n_grid: list = field(default_factory=list)
    r_hat: list = field(default_factory=list)
    vartheta: Estimate | None = None
    stabilization_gap: float = math.nan
    stabilization_se: float = math.nan
    stabilization_paired_se: float = math.nan

    def rows(self):
        return [_est_row("r_hat", est, n=n) for n, est in zip(self.n_grid, self.r_hat)]


def check_strong_rate(env, n_grid: Sequence[int], replicates: int, seed: int,
                      workers: int | None = None, n_se: float = 3.0,
                      deterministic_tol: float = 1e-3) -> StrongRateReport:
    """``gamma**-n P(Z_n = 1) = E_tilted[P(Z_n > 0 | env)**2]`` along ``n_grid``.

    All grid points are read off the same paths. When the environment is
    degenerate the estimates carry no noise and stabilization is judged by
    ``deterministic_tol`` instead of standard errors.
    """
    _, tilted = _prepare(env, STRONG)
    grid = sorted(int(n) for n in n_grid)
    n_max = grid[-1]

    def block(rng, size):
        bq = BatchQuenched(tilted.sample_batch(rng, size, n_max))
        return np.column_stack([np.exp(2 * bq.log_survival(n)) for n in grid])

    acc = accumulate_blocks(block, len(grid), replicates, seed, tag=311, workers=workers,
                            block_size=block_size_for(n_max))
    ests = [acc.estimate(i, seed, n=n) for i, n in enumerate(grid)]
    se = acc.stderr
    monotone = all(acc.mean[i + 1] <= acc.mean[i] + n_se * math.hypot(se[i], se[i + 1])
                   for i in range(len(grid) - 1))
    half = int(np.argmin([abs(n - n_max / 2) for n in grid]))
    gap = abs(acc.mean[-1] - acc.mean[half])
    gap_se = math.hypot(se[-1], se[half])
    coef = np.zeros(len(grid))
    coef[-1], coef[half] = 1.0, -1.0
    paired_se = acc.linear(coef)[1]
    report = StrongRateReport(
        experiment="strong-rate", n_grid=grid, r_hat=ests, vartheta=ests[-1],
        stabilization_gap=float(gap), stabilization_se=float(gap_se),
        stabilization_paired_se=float(paired_se))
    report.checks = {
        "vartheta_positive": ests[-1].value > 0,
        "r_hat_nonincreasing": monotone,
        "stabilized": (len(grid) == 1 or gap < n_se * gap_se
                       or (gap_se == 0.0 and gap < deterministic_tol)),
    }
    return report


@dataclass
class UniformReport(Report):
    n: int = 0
    c: int = 0
    distribution: ConditionalDistribution | None = None
    max_deviation: float = math.nan

    def rows(self):
        return _dist_rows("conditional_mass", self.distribution,
                          self.distribution.diagnostics.get("replicates", 0), n=self.n)


def check_uniform_conditional(env, n: int, c: int, replicates: int, seed: int,
                              workers: int | None = None, tol: float = 0.03) -> UniformReport:
    """``P(Z_n = k | 1 <= Z_n <= c)`` for ``k = 1..c`` from common paths."""
    _, tilted = _prepare(env, STRONG, INTERMEDIATE)
    zs = np.arange(1, c + 1)

    def block(rng, size):
        bq = BatchQuenched(tilted.sample_batch(rng, size, n))
        vals = np.exp(bq.log_scaled_prob_eq(zs, n))
        return np.column_stack([vals, vals.sum(axis=1)])

    acc = accumulate_blocks(block, c + 1, replicates, seed, tag=321, workers=workers,
                            block_size=block_size_for(n))
    dist = ConditionalDistribution.from_ratios(acc, range(c), c, zs, replicates=acc.count)
    dev = float(np.abs(dist.masses - 1.0 / c).max())
    report = UniformReport(experiment="uniform-conditional", n=n, c=c, distribution=dist,
                           max_deviation=dev)
    report.checks = {"max_deviation_below_tol": dev < tol,
                     "masses_nonnegative": bool(np.all(dist.masses >= 0))}
    return report


def _log_extinction(log_surv: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log1p(-np.minimum(np.exp(log_surv), 1.0))


def _limit_law_columns(log_surv: np.ndarray, zs: np.ndarray) -> np.ndarray:
    """``z s**2 (1 - s)**(z - 1)`` per path and ``z``, plus the exact tail beyond ``max(zs)``."""
    s = np.exp(log_surv)
    log_ext = _log_extinction(log_surv)
    cols = np.exp(np.log(zs)[None, :] + 2 * log_surv[:, None]
                  + _xlogy_power(log_ext[:, None], zs[None, :] - 1))
    z_max = zs[-1]
    tail = np.exp(_xlogy_power(log_ext, z_max)) * (1 + z_max * s)
    return np.column_stack([cols, tail])


@dataclass
class StrongPathReport(Report):
    n: int = 0
    t: float = math.nan
    horizon: int = 0
    lhs: ConditionalDistribution | None = None
    r_hat: ConditionalDistribution | None = None
    r_hat_double: ConditionalDistribution | None = None
    r_sum: float = math.nan
    r_tail: float = math.nan
    horizon_gap: float = math.nan
    tv: float = math.nan
    tv_se: float = math.nan
    t_independence: dict = field(default_factory=dict)

    def rows(self):
        reps = self.lhs.diagnostics.get("replicates", 0)
        return (_dist_rows("conditional_mass", self.lhs, reps, n=self.n, t=self.t)
                + _dist_rows("r_z", self.r_hat, self.r_hat.diagnostics.get("replicates", 0),
                             n=self.horizon))


def limit_law(tilted: TiltedEnvironment, horizon: int, zs: np.ndarray, replicates: int,
              seed: int, tag: int, workers: int | None = None,
              conditioned: bool = False, extension: int | None = None):
    """``z E[s**2 (1 - s)**(z - 1)]`` with ``s`` the survival at ``horizon`` and ``2 horizon``.

    With ``conditioned`` the paths come from the rejection sampler for the
    walk staying nonnegative (extension ``B`` defaults to four times ``2 horizon``).
    Returns the two distributions and the rejection acceptance rate.
    """
    zs = np.asarray(zs, dtype=int)
    long = 2 * horizon
    rates = []

    def block(rng, size):
        if conditioned:
            sample = sample_conditioned_nonneg(tilted, long, rng, extension, size=size)
            rates.append((sample.paths.shape[0], sample.attempts))
            batch = sample.paths
        else:
            batch = tilted.sample_batch(rng, size, long)
        bq = BatchQuenched(batch)
        return np.column_stack([_limit_law_columns(bq.log_survival(horizon), zs),
                                _limit_law_columns(bq.log_survival(long), zs)])

    width = len(zs) + 1
    acc = accumulate_blocks(block, 2 * width, replicates, seed, tag=tag, workers=workers,
                            block_size=block_size_for(long))
    dists = []
    for off, h in ((0, horizon), (width, long)):
        mean = acc.mean[off:off + len(zs)]
        se = acc.stderr[off:off + len(zs)]
        dists.append(ConditionalDistribution(
            zs, mean.copy(), se.copy(),
            {"horizon": h, "tail_mass": float(acc.mean[off + len(zs)]),
             "replicates": acc.count}))
    rate = None
    if rates:
        rate = sum(a for a, _ in rates) / sum(b for _, b in rates)
        for d in dists:
            d.diagnostics["acceptance_rate"] = rate
            d.diagnostics["horizon_extension"] = 4 * long if extension is None else extension
    return dists[0], dists[1], rate


def interior_time_law(tilted: TiltedEnvironment, n: int, t: float, zs: np.ndarray,
                      replicates: int, seed: int, workers: int | None = None,
                      tag: int = 331) -> ConditionalDistribution:
    """``P(Z_floor(nt) = z | Z_n = 1)`` from common tilted paths.

    Per path, ``exp(S_n) P(Z_j = z, Z_n = 1 | env)`` factorizes into
    ``s_j**2 H_j**(z-1)`` for the prefix and ``z s'**2 (1 - s')**(z-1)`` for the
    ``z`` subtrees of the suffix, ``s'`` being the suffix survival probability.
    """
    if not (0 < t < 1):
        raise ValueError("t must lie in (0, 1)")
    zs = np.asarray(zs, dtype=int)
    j = int(math.floor(n * t))

    def block(rng, size):
        bq = BatchQuenched(tilted.sample_batch(rng, size, n))
        suffix = bq.suffix_log_survival(j)
        log_ext = _log_extinction(suffix)
        log_vals = (2 * bq.log_survival(j)[:, None]
                    + _xlogy_power(bq.log_h(j)[:, None], zs[None, :] - 1)
                    + np.log(zs)[None, :] + 2 * suffix[:, None]
                    + _xlogy_power(log_ext[:, None], zs[None, :] - 1))
        return np.column_stack([np.exp(log_vals), np.exp(2 * bq.log_survival(n))])

    acc = accumulate_blocks(block, len(zs) + 1, replicates, seed, tag=tag, workers=workers,
                            block_size=block_size_for(n))
    return ConditionalDistribution.from_ratios(acc, range(len(zs)), len(zs), zs,
                                               replicates=acc.count, split=j)


def _t_pair_check(law: Callable, t_pair, n_se: float) -> dict:
    first, second = (law(t) for t in t_pair)
    tv, se = tv_distance(first, second)
    return {"t_pair": list(t_pair), "tv": tv, "se": se, "within": tv < n_se * se}


def check_strong_conditional_path(env, n: int, t: float, z_max: int, horizon: int,
                                  replicates: int, seed: int, workers: int | None = None,
                                  tol: float = 0.05, t_pair: Sequence[float] | None = None,
                                  n_se: float = 3.0) -> StrongPathReport:
    """Compare ``P(Z_floor(nt) = z | Z_n = 1)`` with ``r_z`` over ``z <= z_max``.

    ``r_z`` is evaluated at ``horizon`` and ``2 horizon``; ``t_pair`` adds a
    test that the conditional law does not depend on ``t``.
    """
    _, tilted = _prepare(env, STRONG)
    zs = np.arange(1, z_max + 1)
    lhs = interior_time_law(tilted, n, t, zs, replicates, seed, workers)
    r_hat, r_double, _ = limit_law(tilted, horizon, zs, replicates, seed, tag=332,
                                   workers=workers)
    tv, tv_se = tv_distance(lhs, r_hat)
    report = StrongPathReport(
        experiment="strong-conditional-path", n=n, t=t, horizon=horizon, lhs=lhs,
        r_hat=r_hat, r_hat_double=r_double, r_sum=r_hat.total,
        r_tail=r_hat.diagnostics["tail_mass"],
        horizon_gap=float(np.abs(r_hat.masses - r_double.masses).max()), tv=tv, tv_se=tv_se)
    report.checks = {
        "tv_below_tol": tv < tol,
        "r_normalized": abs(report.r_sum + report.r_tail - 1.0) < 1e-9,
        "masses_nonnegative": bool(np.all(lhs.masses >= 0)),
    }
    if t_pair is not None:
        report.t_independence = _t_pair_check(
            lambda s: interior_time_law(tilted, n, s, zs, replicates, seed, workers), t_pair, n_se)
        report.checks["t_independent"] = report.t_independence["within"]
    return report


# --------------------------------------------------------------------------- #
# intermediately supercritical regime

@dataclass
class IntermediateRateReport(Report):
    n_grid: list = field(default_factory=list)
    theta_hat: list = field(default_factory=list)
    survival_sq: list = field(default_factory=list)
    prob_nonneg: list = field(default_factory=list)
    sqrt_n_prob_nonneg: list = field(default_factory=list)
    theta_gap: float = math.nan
    theta_gap_se: float = math.nan
    scaling_gap: float = math.nan
    scaling_gap_se: float = math.nan
    theta_gap_paired_se: float = math.nan

    def rows(self):
        out = []
        for n, th, ss, pm, sq in zip(self.n_grid, self.theta_hat, self.survival_sq,
                                     self.prob_nonneg, self.sqrt_n_prob_nonneg):
            out += [_est_row("theta_hat", th, n=n), _est_row("survival_sq", ss, n=n),
                    _est_row("prob_min_nonneg", pm, n=n), _est_row("sqrt_n_prob_min_nonneg", sq, n=n)]
        return out


def check_intermediate_rate(env, n_grid: Sequence[int], replicates: int, seed: int,
                            workers: int | None = None, n_se: float = 3.0) -> IntermediateRateReport:
    """``theta(n) = E_tilted[P(Z_n > 0 | env)**2] / P_tilted(min S >= 0)`` along ``n_grid``."""
    _, tilted = _prepare(env, INTERMEDIATE)
    grid = sorted(int(n) for n in n_grid)
    n_max = grid[-1]
    g = len(grid)

    def block(rng, size):
        bq = BatchQuenched(tilted.sample_batch(rng, size, n_max))
        running_min = np.minimum.accumulate(bq.s[:, 1:], axis=1)
        sq = [np.exp(2 * bq.log_survival(n)) for n in grid]
        nonneg = [(running_min[:, n - 1] >= 0).astype(float) for n in grid]
        return np.column_stack(sq + nonneg)

    acc = accumulate_blocks(block, 2 * g, replicates, seed, tag=341, workers=workers,
                            block_size=block_size_for(n_max))
    thetas, sqs, pms, scaled = [], [], [], []
    for i, n in enumerate(grid):
        num = np.zeros(2 * g)
        den = np.zeros(2 * g)
        num[i], den[g + i] = 1.0, 1.0
        v, e = acc.ratio(num, den)
        thetas.append(Estimate(v, e, acc.count, seed, diagnostics={"n": n}))
        sqs.append(acc.estimate(i, seed, n=n))
        pms.append(acc.estimate(g + i, seed, n=n))
        scaled.append(Estimate(math.sqrt(n) * pms[-1].value, math.sqrt(n) * pms[-1].stderr,
                               acc.count, seed, diagnostics={"n": n}))
    half = int(np.argmin([abs(n - n_max / 2) for n in grid]))
    report = IntermediateRateReport(
        experiment="intermediate-rate", n_grid=grid, theta_hat=thetas, survival_sq=sqs,
        prob_nonneg=pms, sqrt_n_prob_nonneg=scaled,
        theta_gap=abs(thetas[-1].value - thetas[half].value),
        theta_gap_se=math.hypot(thetas[-1].stderr, thetas[half].stderr),
        theta_gap_paired_se=_ratio_difference_se(acc, (len(grid) - 1, half), g),
        scaling_gap=abs(scaled[-1].value - scaled[half].value),
        scaling_gap_se=math.hypot(scaled[-1].stderr, scaled[half].stderr))
    report.checks = {
        "theta_positive": all(th.value > 0 for th in thetas),
        "theta_stabilized": report.theta_gap < n_se * report.theta_gap_se,
        "sqrt_n_scaling_stabilized": report.scaling_gap < n_se * report.scaling_gap_se,
    }
    return report


def _ratio_difference_se(acc: MomentAccumulator, pair, g: int) -> float:
    """Delta-method se of ``theta(i) - theta(j)`` accounting for common paths."""
    grad = np.zeros(acc.dim)
    for sign, i in zip((1.0, -1.0), pair):
        num, den = acc.mean[i], acc.mean[g + i]
        grad[i] += sign / den
        grad[g + i] -= sign * num / den ** 2
    return math.sqrt(max(float(grad @ acc.covariance @ grad), 0.0))


def rayleigh_cdf(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, -np.expm1(-0.5 * np.maximum(x, 0) ** 2), 0.0)


@dataclass
class MeanderReport(Report):
    n: int = 0
    ks_distance: float = math.nan
    ks_resolution: float = math.nan
    negative_mass: float = math.nan
    effective_sample_size: float = math.nan
    weight_total: float = math.nan
    midpoint_ks_vs_conditioned_walk: float = math.nan
    conditioned_walk_endpoint_ks: float = math.nan
    replicates: int = 0

    def rows(self):
        base = {"n": self.n, "replicates": self.replicates, "stderr": None}
        return [{"quantity": "ks_distance", "value": self.ks_distance, **base},
                {"quantity": "negative_mass", "value": self.negative_mass, **base},
                {"quantity": "effective_sample_size", "value": self.effective_sample_size, **base},
                {"quantity": "midpoint_ks_vs_conditioned_walk",
                 "value": self.midpoint_ks_vs_conditioned_walk, **base}]


_HIST_LO, _HIST_HI, _HIST_WIDTH = -4.0, 8.0, 1e-3


def _hist(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    nb = int(round((_HIST_HI - _HIST_LO) / _HIST_WIDTH))
    idx = np.floor((values - _HIST_LO) / _HIST_WIDTH).astype(np.int64) + 1
    idx = np.clip(idx, 0, nb + 1)
    return np.bincount(idx, weights=weights, minlength=nb + 2)


def _weighted_cdf_at_edges(hist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edges ``e_i`` and the weighted mass of ``(-inf, e_i)``."""
    nb = len(hist) - 2
    edges = _HIST_LO + _HIST_WIDTH * np.arange(nb + 1)
    cdf = np.cumsum(hist)[:-1] / hist.sum()
    return edges, cdf


def _ks_between(h1: np.ndarray, h2: np.ndarray) -> float:
    _, c1 = _weighted_cdf_at_edges(h1)
    _, c2 = _weighted_cdf_at_edges(h2)
    return float(np.abs(c1 - c2).max())


def check_meander(env, n: int, replicates: int, seed: int, workers: int | None = None,
                  ks_tol: float = 0.05, negative_tol: float = 0.02) -> MeanderReport:
    """Law of ``S_n / (sigma sqrt(n))`` given ``Z_n = 1`` against the Rayleigh law.

    Given ``Z_n = 1`` the tilted path carries weight ``P(Z_n > 0 | env)**2``.
    The weighted histogram (bin width 1e-3) is compared with
    ``1 - exp(-x**2 / 2)`` at the bin edges. As a diagnostic, the weighted law
    at ``t = 1/2`` is compared with the same paths restricted to
    ``min S >= 0``.
    """
    _, tilted = _prepare(env, INTERMEDIATE)
    scale = 1.0 / (tilted.sigma() * math.sqrt(n))
    mid = n // 2

    def block(rng, size):
        bq = BatchQuenched(tilted.sample_batch(rng, size, n))
        w = np.exp(2 * bq.log_survival(n))
        if np.any(w < 0):
            raise AssertionError("negative path weight")
        end = bq.s[:, n] * scale
        half = bq.s[:, mid] * scale
        ind = stays_nonneg(bq.s).astype(float)
        return (_hist(end, w), _hist(half, w), _hist(half, ind), _hist(end, ind),
                np.array([w.sum(), (w ** 2).sum(), w[end < 0].sum()]))

    h_end, h_mid, h_mid_c, h_end_c, sums = sum_blocks(
        block, replicates, seed, tag=351, workers=workers, block_size=block_size_for(n))
    edges, cdf = _weighted_cdf_at_edges(h_end)
    ks = float(np.abs(cdf - rayleigh_cdf(edges)).max())
    _, cdf_c = _weighted_cdf_at_edges(h_end_c)
    report = MeanderReport(
        experiment="meander", n=n, ks_distance=ks,
        ks_resolution=float(h_end[1:-1].max() / h_end.sum()),
        negative_mass=float(sums[2] / sums[0]),
        effective_sample_size=float(sums[0] ** 2 / sums[1]), weight_total=float(sums[0]),
        midpoint_ks_vs_conditioned_walk=_ks_between(h_mid, h_mid_c),
        conditioned_walk_endpoint_ks=float(np.abs(cdf_c - rayleigh_cdf(edges)).max()),
        replicates=int(replicates))
    report.checks = {"ks_below_tol": ks < ks_tol,
                     "negative_mass_below_tol": report.negative_mass < negative_tol}
    return report


@dataclass
class MinimumConditionalReport(Report):
    n: int = 0
    t: float = math.nan
    horizon: int = 0
    lhs: ConditionalDistribution | None = None
    q_hat: ConditionalDistribution | None = None
    q_hat_double: ConditionalDistribution | None = None
    q_sum: float = math.nan
    q_tail: float = math.nan
    horizon_gap: float = math.nan
    acceptance_rate: float = math.nan
    mass_up_to_10: float = math.nan
    tv: float = math.nan
    tv_se: float = math.nan
    t_independence: dict = field(default_factory=dict)

    def rows(self):
        reps = self.lhs.diagnostics.get("replicates", 0)
        return (_dist_rows("conditional_mass", self.lhs, reps, n=self.n, t=self.t)
                + _dist_rows("q_z", self.q_hat, self.q_hat.diagnostics.get("replicates", 0),
                             n=self.horizon))


def minimum_time_law(tilted: TiltedEnvironment, n: int, t: float, zs: np.ndarray,
                     replicates: int, seed: int, workers: int | None = None,
                     tag: int = 361) -> ConditionalDistribution:
    """``P(Z_tau = z | Z_n = 1)`` with ``tau`` the first minimum of ``S`` on ``[floor(nt), n]``."""
    j0 = int(math.floor(n * t))
    z_max = len(zs)

    def block(rng, size):
        bq = BatchQuenched(tilted.sample_batch(rng, size, n))
        tau = first_min_index(bq.s, j0)
        rows = np.arange(size)
        log_surv_tau = -bq.log_d[rows, tau]
        log_h_tau = bq.log_a[rows, tau] + log_surv_tau
        suffix = bq.suffix_log_survival(tau)
        log_ext = _log_extinction(suffix)
        log_vals = (2 * log_surv_tau[:, None]
                    + _xlogy_power(log_h_tau[:, None], zs[None, :] - 1)
                    + np.log(zs)[None, :] + 2 * suffix[:, None]
                    + _xlogy_power(log_ext[:, None], zs[None, :] - 1))
        return np.column_stack([np.exp(log_vals), np.exp(2 * bq.log_survival(n))])

    acc = accumulate_blocks(block, z_max + 1, replicates, seed, tag=tag, workers=workers,
                            block_size=block_size_for(n))
    return ConditionalDistribution.from_ratios(acc, range(z_max), z_max, zs,
                                               replicates=acc.count, window_start=j0)


def check_minimum_conditional(env, n: int, t: float, z_max: int, horizon: int,
                              replicates: int, seed: int, rhs_replicates: int | None = None,
                              extension: int | None = None, workers: int | None = None,
                              tol: float = 0.07, t_pair: Sequence[float] | None = None,
                              n_se: float = 3.0) -> MinimumConditionalReport:
    """Law of ``Z`` at the first minimum after ``floor(nt)`` given ``Z_n = 1`` against ``q(z)``.

    ``q(z) = z E+[s**2 (1 - s)**(z - 1)]`` is evaluated under the walk
    conditioned to stay nonnegative (rejection sampler) at horizons ``M`` and
    ``2 M``.
    """
    if not (0 < t < 1):
        raise ValueError("t must lie in (0, 1)")
    _, tilted = _prepare(env, INTERMEDIATE)
    zs = np.arange(1, z_max + 1)
    lhs = minimum_time_law(tilted, n, t, zs, replicates, seed, workers)
    q_hat, q_double, rate = limit_law(tilted, horizon, zs, rhs_replicates or replicates, seed,
                                      tag=362, workers=workers, conditioned=True,
                                      extension=extension)
    tv, tv_se = tv_distance(lhs, q_hat)
    report = MinimumConditionalReport(
        experiment="minimum-conditional", n=n, t=t, horizon=horizon, lhs=lhs, q_hat=q_hat,
        q_hat_double=q_double, q_sum=q_hat.total, q_tail=q_hat.diagnostics["tail_mass"],
        horizon_gap=float(np.abs(q_hat.masses - q_double.masses).max()),
        acceptance_rate=rate, mass_up_to_10=float(lhs.masses[:10].sum()), tv=tv, tv_se=tv_se)
    report.checks = {
        "tv_below_tol": tv < tol,
        "q_normalized": abs(report.q_sum + report.q_tail - 1.0) < 1e-9,
        "masses_nonnegative": bool(np.all(lhs.masses >= 0)),
    }
    if t_pair is not None:
        report.t_independence = _t_pair_check(
            lambda s: minimum_time_law(tilted, n, s, zs, replicates, seed, workers), t_pair, n_se)
        report.checks["t_independent"] = report.t_independence["within"]
    return report


@dataclass
class ThetaSeriesReport(Report):
    terms: list = field(default_factory=list)
    theta: Estimate | None = None
    half_sum: Estimate | None = None
    acceptance_rate: float = math.nan
    ratio_consistency: dict = field(default_factory=dict)

    def rows(self):
        out = [_est_row("theta_term", est, k=k) for k, est in enumerate(self.terms)]
        out.append(_est_row("theta_series", self.theta))
        return out


def estimate_theta_series(env, k_max: int, horizon: int, replicates: int, seed: int,
                          extension: int | None = None, workers: int | None = None,
                          theta_ratio: Estimate | None = None) -> ThetaSeriesReport:
    """Partial sums of ``theta = sum_k E[E+[(1 - f_{0,k}(P_inf^k))**2]; tau_k = k]``.

    Outer prefixes of length ``k`` come from the tilted measure; each is paired
    with an independent suffix from the conditioned rejection sampler, for
    which ``1 - P_inf^k`` is approximated by the survival probability up to
    ``horizon``.
    """
    _, tilted = _prepare(env, INTERMEDIATE)
    rates = []

    def block(rng, size):
        outer = BatchQuenched(tilted.sample_batch(rng, size, k_max))
        sample = sample_conditioned_nonneg(tilted, horizon, rng, extension, size=size)
        rates.append((size, sample.attempts))
        log_surv_inf = BatchQuenched(sample.paths).log_survival()
        cols = []
        for k in range(k_max + 1):
            new_min = first_min_index(outer.s[:, :k + 1]) == k
            term = np.exp(2 * outer.log_one_minus_gen_fn(log_surv_inf, k))
            cols.append(np.where(new_min, term, 0.0))
        cols = np.column_stack(cols)
        return np.column_stack([cols, cols.sum(axis=1), cols[:, :k_max // 2 + 1].sum(axis=1)])

    acc = accumulate_blocks(block, k_max + 3, replicates, seed, tag=371, workers=workers,
                            block_size=block_size_for(max(horizon * 5, k_max)))
    terms = [acc.estimate(k, seed, k=k) for k in range(k_max + 1)]
    report = ThetaSeriesReport(
        experiment="theta-series", terms=terms, theta=acc.estimate(k_max + 1, seed, k_max=k_max),
        half_sum=acc.estimate(k_max + 2, seed, k_max=k_max // 2),
        acceptance_rate=sum(a for a, _ in rates) / sum(b for _, b in rates))
    if theta_ratio is not None:
        gap = abs(report.theta.value - theta_ratio.value)
        se = math.hypot(report.theta.stderr, theta_ratio.stderr)
        report.ratio_consistency = {"theta_ratio": theta_ratio.value, "gap": gap, "se": se,
                                    "within_3se": gap < 3 * se}
    report.checks = {"terms_nonnegative": all(tm.value >= 0 for tm in terms),
                     "theta_positive": report.theta.value > 0}
    return report


@dataclass
class EarlyMinimumReport(Report):
    n: int = 0
    z_values: list = field(default_factory=list)
    m_grid: list = field(default_factory=list)
    ratios: dict = field(default_factory=dict)

    def rows(self):
        return [_est_row("early_minimum_ratio", est, n=self.n, z=z, m=m)
                for z, ests in self.ratios.items() for m, est in zip(self.m_grid, ests)]


def check_early_minimum(env, n: int, z_values: Sequence[int], m_grid: Sequence[int],
                        replicates: int, seed: int, workers: int | None = None,
                        n_se: float = 3.0, bound: float = 0.1,
                        bound_at: int = 20) -> EarlyMinimumReport:
    """``P(Z_n = z, tau_n > m) / (gamma**n P(min S >= 0))`` along ``m_grid``.

    The numerator is ``gamma**n E_tilted[s_n**2 H_n**(z-1); tau_n > m]``.
    """
    _, tilted = _prepare(env, INTERMEDIATE)
    zs = [int(z) for z in z_values]
    ms = sorted(int(m) for m in m_grid)
    width = len(zs) * len(ms)

    def block(rng, size):
        bq = BatchQuenched(tilted.sample_batch(rng, size, n))
        tau = first_min_index(bq.s)
        vals = np.exp(bq.log_scaled_prob_eq(zs, n))
        cols = [vals[:, i] * (tau > m) for i in range(len(zs)) for m in ms]
        return np.column_stack(cols + [stays_nonneg(bq.s).astype(float)])

    acc = accumulate_blocks(block, width + 1, replicates, seed, tag=381, workers=workers,
                            block_size=block_size_for(n))
    ratios = {}
    den = np.zeros(width + 1)
    den[-1] = 1.0
    for i, z in enumerate(zs):
        ests = []
        for j, m in enumerate(ms):
            num = np.zeros(width + 1)
            num[i * len(ms) + j] = 1.0
            v, e = acc.ratio(num, den)
            ests.append(Estimate(v, e, acc.count, seed, diagnostics={"z": z, "m": m}))
        ratios[z] = ests
    report = EarlyMinimumReport(experiment="early-minimum", n=n, z_values=zs, m_grid=ms,
                                ratios=ratios)
    monotone = all(
        ests[j + 1].value <= ests[j].value + n_se * math.hypot(ests[j].stderr, ests[j + 1].stderr)
        for ests in ratios.values() for j in range(len(ms) - 1))
    checks = {"ratio_nonincreasing_in_m": monotone}
    if len(zs) > 1:
        first = ratios[zs[0]]
        checks["z_insensitive"] = all(
            abs(est.value - ref.value) <= n_se * math.hypot(est.stderr, ref.stderr)
            for z in zs[1:] for est, ref in zip(ratios[z], first))
    if n in ms:
        checks["ratio_zero_at_m_equals_n"] = all(ests[ms.index(n)].value == 0 for ests in ratios.values())
    if bound_at in ms:
        checks[f"ratio_below_{bound}_at_m_{bound_at}"] = all(
            ests[ms.index(bound_at)].value < bound for ests in ratios.values())
    report.checks = checks
    return report
