"""Deterministic block-parallel Monte Carlo plumbing.

Replicates are split into fixed-size blocks. Block ``b`` draws from its own
generator seeded by ``(seed, tag, b)``, and block results are merged in block
order, so output does not depend on the number of workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_BLOCK_SIZE = 8192
WORKERS_ENV_VAR = "BPRE_LAB_WORKERS"


@dataclass
class Estimate:
    value: float
    stderr: float
    replicates: int
    seed: int
    effective_sample_size: float = math.nan
    diagnostics: dict = field(default_factory=dict)
    log_value: float | None = None

    def __post_init__(self) -> None:
        if math.isnan(self.effective_sample_size):
            self.effective_sample_size = float(self.replicates)

    def within(self, target: float, n_se: float) -> bool:
        return abs(self.value - target) <= n_se * self.stderr

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "stderr": self.stderr,
            "replicates": self.replicates,
            "seed": self.seed,
            "effective_sample_size": self.effective_sample_size,
            "log_value": self.log_value,
            "diagnostics": self.diagnostics,
        }


def resolve_workers(workers: int | None) -> int:
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        return max(1, int(env))
    if workers is None:
        return os.cpu_count() or 1
    return max(1, int(workers))


def block_rng(seed: int, tag: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tag, block])))


class MomentAccumulator:
    """Running mean and co-moment matrix of a vector of per-replicate values.

    Blocks are combined with the pairwise update of Chan et al.; the running
    minimum and maximum let constant data report an exactly zero spread.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.comoment = np.zeros((dim, dim))
        self.lo = np.full(dim, np.inf)
        self.hi = np.full(dim, -np.inf)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "MomentAccumulator":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        acc = cls(values.shape[1])
        if len(values) == 0:
            return acc
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(values), axis=1))[0])
            raise FloatingPointError(f"non-finite replicate value at row {bad}: {values[bad]}")
        acc.count = len(values)
        acc.mean = values.mean(axis=0)
        centered = values - acc.mean
        acc.comoment = centered.T @ centered
        acc.lo = values.min(axis=0)
        acc.hi = values.max(axis=0)
        return acc

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean = other.count, other.mean.copy()
            self.comoment, self.lo, self.hi = other.comoment.copy(), other.lo.copy(), other.hi.copy()
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.comoment = (self.comoment + other.comoment
                         + np.outer(delta, delta) * (self.count * other.count / n))
        self.mean = self.mean + delta * (other.count / n)
        self.count = n
        self.lo = np.minimum(self.lo, other.lo)
        self.hi = np.maximum(self.hi, other.hi)
        return self

    @property
    def constant(self) -> np.ndarray:
        return self.lo == self.hi

    @property
    def covariance(self) -> np.ndarray:
        """Covariance matrix of the sample means."""
        if self.count < 2:
            return np.zeros((self.dim, self.dim))
        cov = self.comoment / (self.count - 1) / self.count
        const = self.constant
        cov[const, :] = 0.0
        cov[:, const] = 0.0
        return cov

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def ratio(self, num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
        """``num . mean / den . mean`` with its delta-method standard error."""
        num = np.asarray(num, dtype=float)
        den = np.asarray(den, dtype=float)
        top, bottom = float(num @ self.mean), float(den @ self.mean)
        value = top / bottom
        grad = (num - value * den) / bottom
        var = float(grad @ self.covariance @ grad)
        return value, math.sqrt(max(var, 0.0))

    def linear(self, coef: np.ndarray) -> tuple[float, float]:
        coef = np.asarray(coef, dtype=float)
        var = float(coef @ self.covariance @ coef)
        return float(coef @ self.mean), math.sqrt(max(var, 0.0))

    def estimate(self, index: int, seed: int, **diagnostics) -> Estimate:
        return Estimate(float(self.mean[index]), float(self.stderr[index]),
                        self.count, seed, diagnostics=dict(diagnostics))


def block_sizes(replicates: int, block_size: int) -> list[int]:
    full, rest = divmod(int(replicates), block_size)
    return [block_size] * full + ([rest] if rest else [])


def map_blocks(fn: Callable[[np.random.Generator, int], object], replicates: int,
               seed: int, tag: int = 0, workers: int | None = None,
               block_size: int = DEFAULT_BLOCK_SIZE) -> list:
    """Evaluate ``fn(rng, size)`` on every block; results come back in block order."""
    sizes = block_sizes(replicates, block_size)
    jobs = [(block_rng(seed, tag, b), size) for b, size in enumerate(sizes)]
    n_workers = min(resolve_workers(workers), max(len(jobs), 1))
    if n_workers == 1:
        return [fn(rng, size) for rng, size in jobs]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


def accumulate_blocks(fn: Callable[[np.random.Generator, int], np.ndarray], dim: int,
                      replicates: int, seed: int, tag: int = 0,
                      workers: int | None = None,
                      block_size: int = DEFAULT_BLOCK_SIZE) -> MomentAccumulator:
    """Moments of the ``(size, dim)`` per-replicate arrays returned by ``fn``."""
    acc = MomentAccumulator(dim)
    for values in map_blocks(fn, replicates, seed, tag, workers, block_size):
        acc.merge(MomentAccumulator.from_values(values))
    return acc


def sum_blocks(fn: Callable[[np.random.Generator, int], Sequence[np.ndarray]],
               replicates: int, seed: int, tag: int = 0, workers: int | None = None,
               block_size: int = DEFAULT_BLOCK_SIZE) -> list[np.ndarray]:
    """Elementwise sums of the arrays returned per block (histograms, counts)."""
    totals = None
    for parts in map_blocks(fn, replicates, seed, tag, workers, block_size):
        if totals is None:
            totals = [np.array(part, dtype=float) for part in parts]
        else:
            for total, part in zip(totals, parts):
                total += part
    return totals or []


def effective_sample_size(weights: np.ndarray) -> float:
    weights = np.asarray(weights, dtype=float)
    total = weights.sum()
    sq = (weights ** 2).sum()
    return float(total * total / sq) if sq > 0 else 0.0
