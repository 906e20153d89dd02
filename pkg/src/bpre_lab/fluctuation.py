"""Fluctuation quantities of the associated random walk.

Minima and first-minimum times, probabilities of staying nonnegative, the
renewal function ``u``, a rejection sampler for walks conditioned to stay
nonnegative, and rescaled paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .montecarlo import Estimate, accumulate_blocks
from .quenched import EnvPath, PathBatch

IncrementSampler = Callable[[np.random.Generator, tuple], np.ndarray]


def normal_increments(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _walk(path_or_increments) -> np.ndarray:
    if isinstance(path_or_increments, EnvPath):
        return np.asarray(path_or_increments.s, dtype=float)
    inc = np.asarray(path_or_increments, dtype=float)
    return np.concatenate([[0.0], np.cumsum(inc)])


@dataclass(frozen=True)
class WalkStats:
    """Extremes of ``S_0..S_n`` and first-minimum times.

    ``l_n``/``m_n`` range over ``S_1..S_n`` (both 0 for ``n = 0``); ``tau_n``
    is the first index attaining ``min(0, l_n)``; ``tau_k_n`` and ``l_k_n``
    refer to the window ``[k, n]``.
    """

    n: int
    k: int
    l_n: float
    m_n: float
    tau_n: int
    tau_k_n: int
    l_k_n: float


def walk_stats(path_or_increments, k: int = 0) -> WalkStats:
    """Walk statistics from an :class:`EnvPath` or a sequence of increments."""
    s = _walk(path_or_increments)
    n = len(s) - 1
    if not (0 <= k <= n):
        raise IndexError(f"window start {k} outside [0, {n}]")
    l_n = float(s[1:].min()) if n else 0.0
    m_n = float(s[1:].max()) if n else 0.0
    window = s[k:]
    return WalkStats(n, k, l_n, m_n, int(np.argmin(s)), k + int(np.argmin(window)),
                     float(window.min() - s[k]))


def first_min_index(s: np.ndarray, start=0) -> np.ndarray:
    """Per-row first index in ``[start, n]`` attaining the minimum of ``s``."""
    return start + np.argmin(s[:, start:], axis=1)


def stays_nonneg(s: np.ndarray, n: int | None = None) -> np.ndarray:
    """Per-row indicator of ``min(S_1..S_n) >= 0``."""
    n = s.shape[1] - 1 if n is None else n
    if n == 0:
        return np.ones(s.shape[0], dtype=bool)
    return s[:, 1:n + 1].min(axis=1) >= 0


def _walks(sampler: IncrementSampler, rng: np.random.Generator, size: int, n: int) -> np.ndarray:
    s = np.zeros((size, n + 1))
    np.cumsum(sampler(rng, (size, n)), axis=1, out=s[:, 1:])
    return s


def prob_min_nonneg(sampler: IncrementSampler, n: int, replicates: int, seed: int,
                    workers: int | None = None, tag: int = 201) -> Estimate:
    """Monte Carlo estimate of ``P(min(S_1..S_n) >= 0)``."""
    if n < 1:
        raise ValueError("n must be >= 1")

    def block(rng, size):
        return stays_nonneg(_walks(sampler, rng, size, n)).astype(float)[:, None]

    acc = accumulate_blocks(block, 1, replicates, seed, tag=tag, workers=workers)
    return acc.estimate(0, seed, n=n)


def sparre_andersen(n: int) -> float:
    """``C(2n, n) 4**-n``, the exact value for symmetric continuous increments."""
    return math.exp(math.lgamma(2 * n + 1) - 2 * math.lgamma(n + 1) - 2 * n * math.log(2))


@dataclass(frozen=True)
class RenewalEstimate:
    x: float
    u_hat: float
    stderr: float
    truncation_k: int
    tail_bound_estimate: float
    replicates: int = 0


def renewal_u(sampler: IncrementSampler, x: float, truncation_k: int, replicates: int,
              seed: int, workers: int | None = None, tag: int = 202) -> RenewalEstimate:
    """Estimate ``u(x) = 1 + sum_{k>=1} P(-S_k <= x, M_k < 0)`` truncated at ``truncation_k``.

    ``tail_bound_estimate`` is the summed contribution of the last tenth of the
    retained terms, a proxy for what the truncation leaves out.
    """
    if x < 0:
        return RenewalEstimate(float(x), 0.0, 0.0, truncation_k, 0.0)
    if truncation_k < 1:
        raise ValueError("truncation_k must be >= 1")
    last = max(1, math.ceil(truncation_k / 10))

    def block(rng, size):
        s = _walks(sampler, rng, size, truncation_k)[:, 1:]
        below = np.maximum.accumulate(s, axis=1) < 0
        hits = below & (s >= -x)
        return np.column_stack([hits.sum(axis=1), hits[:, -last:].sum(axis=1)]).astype(float)

    acc = accumulate_blocks(block, 2, replicates, seed, tag=tag, workers=workers)
    return RenewalEstimate(float(x), 1.0 + float(acc.mean[0]), float(acc.stderr[0]),
                           truncation_k, float(acc.mean[1]), acc.count)


class InfeasibleConditioning(RuntimeError):
    """The rejection sampler exceeded its reject budget."""


@dataclass(frozen=True)
class ConditionedSample:
    """Environment prefixes of length ``n`` whose extension stayed nonnegative."""

    paths: PathBatch
    horizon_extension: int
    attempts: int

    @property
    def acceptance_rate(self) -> float:
        return self.paths.shape[0] / self.attempts

    def path(self, i: int = 0) -> EnvPath:
        return self.paths.path(i)


def sample_conditioned_nonneg(tilted, n: int, rng: np.random.Generator,
                              horizon_extension: int | None = None, size: int = 1,
                              max_rejects: int = 10**8, chunk: int = 16384) -> ConditionedSample:
    """Approximate the walk conditioned to stay nonnegative by rejection.

    Paths of length ``n + B`` are drawn under the tilted measure and kept when
    ``min(S_1..S_{n+B}) >= 0``; their first ``n`` steps are returned.
    ``B`` defaults to ``4 n``.
    """
    measure = tilted.require_exact()
    b = 4 * n if horizon_extension is None else int(horizon_extension)
    if b < 0 or n < 1:
        raise ValueError("need n >= 1 and a nonnegative horizon extension")
    length = n + b
    x = measure.x
    kept: list[np.ndarray] = []
    accepted = attempts = 0
    while accepted < size:
        rejects = attempts - accepted
        if rejects > max_rejects:
            raise InfeasibleConditioning(
                f"{rejects} rejections for {accepted}/{size} accepted paths of length {length}")
        idx = measure.sample_indices(rng, (chunk, length))
        s = np.cumsum(x[idx], axis=1)
        ok = np.flatnonzero(s.min(axis=1) >= 0)
        take = ok[: size - accepted]
        kept.append(idx[take, :n])
        accepted += len(take)
        # attempts stop at the last accepted row so the rate is unbiased
        attempts += chunk if accepted < size else (int(take[-1]) + 1 if len(take) else chunk)
    idx = np.concatenate(kept)
    return ConditionedSample(PathBatch(measure.a[idx], measure.p[idx]), b, attempts)


@dataclass(frozen=True)
class RescaledPath:
    """``t -> scale * S_floor(n t)`` sampled on ``t = k / n``."""

    t: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        n = len(self.values) - 1
        k = np.floor(np.asarray(t) * n).astype(int)
        return self.values[np.clip(k, 0, n)]


def rescale_path(path_or_increments, alpha: float = 2.0, sigma: float = 1.0,
                 slowly_varying: float = 1.0) -> RescaledPath:
    """Scale by ``slowly_varying / n**(1/alpha)``; for ``alpha = 2`` also divide by ``sigma``."""
    s = _walk(path_or_increments)
    n = len(s) - 1
    if n < 1:
        raise ValueError("need n >= 1")
    scale = slowly_varying / n ** (1.0 / alpha)
    if alpha == 2.0:
        scale /= sigma
    return RescaledPath(np.arange(n + 1) / n, s * scale)
