"""Laws of the random environment and the exponential change of measure.

The tilted measure reweights the law of ``Q`` by ``exp(-X) / gamma`` with
``X = log m(Q)`` and ``gamma = E[exp(-X)]``. Finite mixtures of linear-fractional
laws are tilted exactly; an :class:`ExternalSampler` is only supported through
self-normalized importance weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.optimize import bisect

from .montecarlo import Estimate, MomentAccumulator, accumulate_blocks
from .offspring_law import LinearFractionalLaw
from .quenched import EnvPath, PathBatch

STRONG = "strongly-supercritical"
INTERMEDIATE = "intermediately-supercritical"
OTHER = "other"

IncrementSampler = Callable[[np.random.Generator, tuple], np.ndarray]


class NoBracketError(ValueError):
    """``E[X exp(-X)]`` keeps one sign over the whole calibration range."""


class EnvironmentModel:
    """Common surface of environment laws."""

    def sample_batch(self, rng: np.random.Generator, size: int, n: int) -> PathBatch:
        raise NotImplementedError

    def sample_path(self, rng: np.random.Generator, n: int) -> EnvPath:
        if n == 0:
            return EnvPath.from_laws([])
        return self.sample_batch(rng, 1, n).path(0)


@dataclass(frozen=True)
class FiniteMixture(EnvironmentModel):
    """``Q`` equals ``atoms[i]`` with probability ``weights[i]``."""

    atoms: tuple[LinearFractionalLaw, ...]
    weights: tuple[float, ...]
    _cdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        atoms = tuple(self.atoms)
        weights = np.asarray(self.weights, dtype=float)
        if len(atoms) == 0 or len(atoms) != len(weights):
            raise ValueError("need one positive weight per atom")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be positive and sum to 1, got {weights.tolist()}")
        weights = weights / weights.sum()
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", tuple(float(w) for w in weights))
        cdf = np.cumsum(weights)
        cdf[-1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @classmethod
    def single(cls, a: float, p: float) -> "FiniteMixture":
        return cls((LinearFractionalLaw(a, p),), (1.0,))

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "FiniteMixture":
        atoms = tuple(LinearFractionalLaw(r["a"], r["p"]) for r in records)
        return cls(atoms, tuple(float(r["weight"]) for r in records))

    def to_records(self) -> list[dict]:
        return [{"a": law.a, "p": law.p, "weight": w} for law, w in zip(self.atoms, self.weights)]

    @property
    def w(self) -> np.ndarray:
        return np.array(self.weights)

    @property
    def x(self) -> np.ndarray:
        return np.array([law.log_mean() for law in self.atoms])

    @property
    def a(self) -> np.ndarray:
        return np.array([law.a for law in self.atoms])

    @property
    def p(self) -> np.ndarray:
        return np.array([law.p for law in self.atoms])

    def expectation(self, values) -> float:
        """Mixture average of per-atom ``values`` (an array or a function of a law)."""
        if callable(values):
            values = [values(law) for law in self.atoms]
        return float(np.dot(self.w, np.asarray(values, dtype=float)))

    def gamma(self) -> float:
        return self.expectation(np.exp(-self.x))

    def tilt(self) -> "TiltedEnvironment":
        g = self.gamma()
        if not (math.isfinite(g) and g > 0):
            raise ValueError(f"gamma = {g} is not a positive finite number")
        tilted = self.w * np.exp(-self.x) / g
        measure = FiniteMixture(self.atoms, tuple(tilted / tilted.sum()))
        return TiltedEnvironment(self, g, "exact", measure)

    def sample_indices(self, rng: np.random.Generator, shape) -> np.ndarray:
        if len(self.atoms) == 1:
            return np.zeros(shape, dtype=np.intp)
        idx = np.searchsorted(self._cdf, rng.random(shape), side="right")
        return np.minimum(idx, len(self.atoms) - 1)

    def sample_batch(self, rng: np.random.Generator, size: int, n: int) -> PathBatch:
        idx = self.sample_indices(rng, (size, n))
        return PathBatch(self.a[idx], self.p[idx])

    def increment_sampler(self) -> IncrementSampler:
        x = self.x

        def draw(rng: np.random.Generator, shape) -> np.ndarray:
            return x[self.sample_indices(rng, shape)]

        return draw

    def mean_x(self) -> float:
        return self.expectation(self.x)

    def var_x(self) -> float:
        mu = self.mean_x()
        return self.expectation((self.x - mu) ** 2)


@dataclass(frozen=True)
class ExternalSampler(EnvironmentModel):
    """Environment given by a user procedure ``draw(rng, shape) -> (a, p)``."""

    draw: Callable[[np.random.Generator, tuple], tuple[np.ndarray, np.ndarray]]
    supports_weights: bool = True

    def sample_batch(self, rng: np.random.Generator, size: int, n: int) -> PathBatch:
        a, p = self.draw(rng, (size, n))
        return PathBatch(np.asarray(a, dtype=float), np.asarray(p, dtype=float))

    def _moments(self, fns, replicates: int, seed: int, tag: int) -> MomentAccumulator:
        def block(rng, size):
            batch = self.sample_batch(rng, size, 1)
            return np.column_stack([f(batch) for f in fns])

        return accumulate_blocks(block, len(fns), replicates, seed, tag=tag)

    def gamma(self, replicates: int = 100_000, seed: int = 0) -> Estimate:
        acc = self._moments([lambda b: np.exp(-b.x[:, 0])], replicates, seed, tag=101)
        est = acc.estimate(0, seed)
        if not (math.isfinite(est.value) and est.value > 0):
            raise ValueError(f"gamma estimate {est.value} signals an invalid environment")
        return est

    def tilt(self, replicates: int = 100_000, seed: int = 0) -> "TiltedEnvironment":
        if not self.supports_weights:
            raise NotImplementedError("external sampler without importance-weight support cannot be tilted")
        return TiltedEnvironment(self, self.gamma(replicates, seed).value, "snis", None)


@dataclass(frozen=True)
class TiltedEnvironment:
    """The environment law under the tilted measure.

    In ``exact`` mode ``measure`` is the reweighted mixture. In ``snis`` mode
    paths come from the base sampler together with log-weights ``-S_n``.
    """

    base: EnvironmentModel
    gamma: float
    mode: Literal["exact", "snis"]
    measure: FiniteMixture | None = None

    def require_exact(self) -> FiniteMixture:
        if self.mode != "exact":
            raise NotImplementedError("this operation needs an exactly tilted finite mixture")
        return self.measure

    @property
    def weights(self) -> tuple[float, ...]:
        return self.require_exact().weights

    def sample_batch(self, rng: np.random.Generator, size: int, n: int) -> PathBatch:
        return self.require_exact().sample_batch(rng, size, n)

    def sample_weighted_batch(self, rng: np.random.Generator, size: int, n: int):
        """``(batch, log_weights)``; weights are constant in exact mode."""
        if self.mode == "exact":
            return self.measure.sample_batch(rng, size, n), np.zeros(size)
        batch = self.base.sample_batch(rng, size, n)
        return batch, -batch.s[:, -1]

    def sample_path(self, rng: np.random.Generator, n: int) -> EnvPath:
        return self.require_exact().sample_path(rng, n)

    def increment_sampler(self) -> IncrementSampler:
        return self.require_exact().increment_sampler()

    def drift(self) -> float:
        return self.require_exact().mean_x()

    def sigma(self) -> float:
        return math.sqrt(self.require_exact().var_x())


@dataclass(frozen=True)
class RegimeReport:
    gamma: float
    drift_original: float
    drift_tilted: float
    variance_tilted: float
    regime: str
    assumption2_moment: float
    tilted_mean_x_exp: float
    stderr: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def regime_report(env: EnvironmentModel, alpha: float = 2.0, epsilon: float = 1.0,
                  tol: float = 1e-10, replicates: int = 100_000, seed: int = 0) -> RegimeReport:
    """Classify ``env`` by the sign of ``E[X exp(-X)]``.

    Finite mixtures are evaluated exactly with tolerance ``tol``; external
    samplers by Monte Carlo with a three-standard-error band.
    """
    if not (0 < alpha <= 2):
        raise ValueError("alpha must lie in (0, 2]")
    power = alpha + epsilon
    if isinstance(env, FiniteMixture):
        x = env.x
        g = env.gamma()
        mxe = env.expectation(x * np.exp(-x))
        tilted = env.tilt().measure
        drift_t = tilted.mean_x()
        var_t = tilted.var_x()
        a2 = tilted.expectation(np.abs(np.log1p(-env.a)) ** power)
        mean_x = env.mean_x()
        band, se = tol, 0.0
    else:
        fns = [lambda b: np.exp(-b.x[:, 0]),
               lambda b: b.x[:, 0] * np.exp(-b.x[:, 0]),
               lambda b: b.x[:, 0] ** 2 * np.exp(-b.x[:, 0]),
               lambda b: np.abs(np.log1p(-b.a[:, 0])) ** power * np.exp(-b.x[:, 0]),
               lambda b: b.x[:, 0]]
        acc = env._moments(fns, replicates, seed, tag=102)
        g, mxe, m2, a2raw, mean_x = acc.mean
        drift_t = mxe / g
        var_t = m2 / g - drift_t ** 2
        a2 = a2raw / g
        se = float(acc.stderr[1])
        band = 3.0 * se
    if mean_x <= 0:
        regime = OTHER
    elif abs(mxe) <= band:
        regime = INTERMEDIATE
    elif drift_t > band:
        regime = STRONG
    else:
        regime = OTHER
    return RegimeReport(float(g), float(mean_x), float(drift_t), float(var_t), regime,
                        float(a2), float(mxe), se)


def _mean_x_exp(atoms: Sequence[LinearFractionalLaw], weights: np.ndarray) -> float:
    x = np.array([law.log_mean() for law in atoms])
    return float(np.dot(weights, x * np.exp(-x)))


def calibrate_intermediate(atoms: Sequence[LinearFractionalLaw],
                           free: Literal["weight", "a", "p"] = "weight", index: int = 0,
                           weights: Sequence[float] | None = None,
                           bracket: tuple[float, float] | None = None,
                           tol: float = 1e-12) -> FiniteMixture:
    """Solve ``E[X exp(-X)] = 0`` for one free parameter by bisection.

    ``free="weight"`` moves the weight of ``atoms[index]``, rescaling the
    other weights proportionally. ``free="a"`` or ``"p"`` moves that parameter
    of ``atoms[index]`` with the weights held fixed.
    """
    atoms = list(atoms)
    k = len(atoms)
    base_w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    base_w = base_w / base_w.sum()

    if free == "weight":
        if k < 2:
            raise ValueError("a free mixing weight needs at least two atoms")
        others = np.delete(base_w, index)
        others = others / others.sum()

        def build(theta):
            w = np.insert(others * (1.0 - theta), index, theta)
            return atoms, w

        lo, hi = bracket or (1e-12, 1.0 - 1e-12)
    elif free in ("a", "p"):
        def build(theta):
            law = atoms[index]
            new = LinearFractionalLaw(theta, law.p) if free == "a" else LinearFractionalLaw(law.a, theta)
            return atoms[:index] + [new] + atoms[index + 1:], base_w

        lo, hi = bracket or ((0.0, 1.0 - 1e-12) if free == "a" else (1e-12, 1.0 - 1e-12))
    else:
        raise ValueError(f"unknown free parameter {free!r}")

    def g(theta):
        return _mean_x_exp(*build(theta))

    g_lo, g_hi = g(lo), g(hi)
    if g_lo == 0:
        root = lo
    elif g_hi == 0:
        root = hi
    elif np.sign(g_lo) == np.sign(g_hi):
        raise NoBracketError(
            f"E[X exp(-X)] has constant sign on [{lo}, {hi}] ({g_lo:.3g}, {g_hi:.3g})")
    else:
        root = bisect(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=2000)
    new_atoms, new_w = build(root)
    if abs(g(root)) >= tol:
        raise ArithmeticError(f"calibration stalled at |E[X exp(-X)]| = {abs(g(root)):.3e}")
    return FiniteMixture(tuple(new_atoms), tuple(new_w))


def sample_env_path(env: EnvironmentModel | TiltedEnvironment, n: int,
                    rng: np.random.Generator) -> EnvPath:
    if n < 0:
        raise ValueError("n must be >= 0")
    return env.sample_path(rng, n)
