"""Exact quenched laws of a linear-fractional branching process.

Given the environment, ``Z_n`` is again linear fractional:

    P(Z_n > 0 | env) = 1 / D_n,   D_n = exp(-S_n) + sum_{k<n} eta_{k+1} exp(-S_k)
    P(Z_n = z | env) = exp(-S_n) P(Z_n > 0 | env)**2 H_n**(z - 1)

with ``H_n = 1 - exp(-S_n) / D_n``. Everything here is kept in log space because
``S_n`` drifts linearly in ``n``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .offspring_law import LinearFractionalLaw

# Slack, in log units, for the pathwise Markov bound; only rounding can use it.
MARKOV_TOL = 1e-12


class MarkovBoundViolation(AssertionError):
    """A sampled path produced a survival probability above ``exp(min S_k)``."""


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def add(self, k: int) -> None:
        with self._lock:
            self.value += k


# number of paths that went through the pathwise Markov check in this process
markov_checked_paths = _Counter()


@dataclass(frozen=True)
class EnvPath:
    """A realized environment prefix ``Q_1..Q_n`` with cached walk values."""

    laws: tuple[LinearFractionalLaw, ...]
    s: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)

    @classmethod
    def from_laws(cls, laws: Sequence[LinearFractionalLaw]) -> "EnvPath":
        laws = tuple(laws)
        x = np.array([law.log_mean() for law in laws], dtype=float)
        s = np.concatenate([[0.0], np.cumsum(x)])
        eta = np.array([law.eta() for law in laws], dtype=float)
        s.flags.writeable = False
        eta.flags.writeable = False
        return cls(laws, s, eta)

    @property
    def n(self) -> int:
        return len(self.laws)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.s)

    def __getitem__(self, item: slice) -> "EnvPath":
        return EnvPath.from_laws(self.laws[item])


@dataclass(frozen=True)
class QuenchedLaw:
    """Law of ``Z_n`` given the environment and ``Z_0 = 1``.

    ``log_h`` is ``None`` for ``n = 0``: the law is a point mass at one and the
    geometric ratio is undefined there.
    """

    n: int
    log_e_sn: float
    log_denominator: float
    log_survival: float
    log_h: float | None

    @property
    def survival(self) -> float:
        return math.exp(self.log_survival)

    @property
    def extinction(self) -> float:
        return -math.expm1(self.log_survival)

    @property
    def h(self) -> float | None:
        return None if self.log_h is None else math.exp(self.log_h)

    @property
    def log_one_minus_h(self) -> float:
        # 1 - H_n = exp(-S_n) P(Z_n > 0 | env)
        return self.log_e_sn + self.log_survival


def quenched_law(path: EnvPath) -> QuenchedLaw:
    n = path.n
    log_e_sn = -float(path.s[-1])
    if n == 0:
        return QuenchedLaw(0, log_e_sn, 0.0, 0.0, None)
    log_terms = np.log(path.eta) - path.s[:-1]
    log_num = float(logsumexp(log_terms))
    log_den = float(np.logaddexp(log_e_sn, log_num))
    return QuenchedLaw(n, log_e_sn, log_den, -log_den, log_num - log_den)


def log_prob_eq(ql: QuenchedLaw, z) -> np.ndarray | float:
    """``log P(Z_n = z | env)`` for ``z >= 1``."""
    if ql.n == 0:
        raise ValueError("point probabilities need n >= 1")
    z_arr = np.asarray(z)
    if np.any(z_arr < 1):
        raise ValueError("z must be >= 1")
    out = ql.log_e_sn + 2.0 * ql.log_survival + (z_arr - 1) * ql.log_h
    return float(out) if out.ndim == 0 else out


def prob_eq(ql: QuenchedLaw, z) -> np.ndarray | float:
    return np.exp(log_prob_eq(ql, z)) if np.ndim(z) else math.exp(log_prob_eq(ql, z))


def prob_eq_from(ql: QuenchedLaw, z0: int, k) -> np.ndarray | float:
    """``P(Z_n = k | env, Z_0 = z0)``.

    ``j`` of the ``z0`` subtrees survive (binomial with the survival
    probability) and the surviving ones contribute independent shifted
    geometric sizes, whose sum is negative binomial.
    """
    if z0 < 1:
        raise ValueError("z0 must be >= 1")
    k_arr = np.atleast_1d(np.asarray(k, dtype=np.int64))
    if np.any(k_arr < 0):
        raise ValueError("k must be >= 0")
    log_ext = math.log(ql.extinction) if ql.extinction > 0 else -math.inf
    out = np.empty(k_arr.shape, dtype=float)
    for i, kk in enumerate(k_arr):
        kk = int(kk)
        if kk == 0:
            out[i] = math.exp(z0 * log_ext) if log_ext > -math.inf else 0.0
            continue
        if ql.n == 0:
            out[i] = 1.0 if kk == z0 else 0.0
            continue
        j = np.arange(1, min(z0, kk) + 1)
        log_binom = gammaln(z0 + 1) - gammaln(j + 1) - gammaln(z0 - j + 1)
        log_negbin = gammaln(kk) - gammaln(j) - gammaln(kk - j + 1)
        with np.errstate(invalid="ignore"):
            ext_part = np.where(z0 - j > 0, (z0 - j) * log_ext, 0.0)
            h_part = np.where(kk - j > 0, (kk - j) * ql.log_h, 0.0)
        terms = (log_binom + j * ql.log_survival + ext_part
                 + log_negbin + j * ql.log_one_minus_h + h_part)
        out[i] = math.exp(float(logsumexp(terms)))
    return float(out[0]) if np.ndim(k) == 0 else out


def survival_from(ql: QuenchedLaw, z0: int) -> float:
    if z0 < 1:
        raise ValueError("z0 must be >= 1")
    return -math.expm1(z0 * math.log1p(-ql.survival)) if ql.survival < 1 else 1.0


def sub_path_gen_fn(path: EnvPath, k: int, n: int, s: float) -> float:
    """``f_{k,n}(s) = f_{k+1}(f_{k+2}(... f_n(s)))``, composed right to left."""
    if not (0 <= k <= n <= path.n):
        raise IndexError(f"need 0 <= k <= n <= {path.n}, got k={k}, n={n}")
    if not (0.0 <= s <= 1.0):
        raise ValueError("s must lie in [0, 1]")
    value = float(s)
    for law in reversed(path.laws[k:n]):
        value = law.gen_fn(value)
    return value


def iterate_gen_fn(path: EnvPath, s: float) -> float:
    return sub_path_gen_fn(path, 0, path.n, s)


@dataclass(frozen=True)
class ForwardResult:
    """Simulated populations; truncated runs carry ``-1`` after the cap was hit."""

    trajectories: np.ndarray
    truncated: np.ndarray


def forward_simulate(path: EnvPath, z0: int, rng: np.random.Generator,
                     runs: int = 1, cap: int = 10**9) -> ForwardResult:
    """Simulate ``runs`` independent populations in the fixed environment ``path``.

    The sum of ``Z`` i.i.d. offspring counts is drawn exactly: the number of
    nonzero counts is binomial and their total is that number plus a negative
    binomial.
    """
    if z0 < 0:
        raise ValueError("z0 must be >= 0")
    traj = np.zeros((runs, path.n + 1), dtype=np.int64)
    traj[:, 0] = z0
    truncated = np.zeros(runs, dtype=bool)
    z = np.full(runs, z0, dtype=np.int64)
    for gen, law in enumerate(path.laws, start=1):
        live = ~truncated
        parents = z[live]
        nonzero = rng.binomial(parents, 1.0 - law.a)
        extra = np.zeros_like(nonzero)
        pos = nonzero > 0
        extra[pos] = rng.negative_binomial(nonzero[pos], 1.0 - law.p)
        z_live = nonzero + extra
        over = z_live > cap
        z[live] = z_live
        idx = np.flatnonzero(live)
        truncated[idx[over]] = True
        traj[:, gen] = np.where(truncated, -1, z)
        # the generation that crossed the cap keeps its value for inspection
        traj[idx[over], gen] = z_live[over]
    return ForwardResult(traj, truncated)


@dataclass(frozen=True)
class PathBatch:
    """``R`` environment paths of common length ``n`` stored as ``(R, n)`` arrays."""

    a: np.ndarray
    p: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    @cached_property
    def x(self) -> np.ndarray:
        return np.log1p(-self.a) - np.log1p(-self.p)

    @cached_property
    def log_eta(self) -> np.ndarray:
        return np.log(self.p) - np.log1p(-self.a)

    @cached_property
    def s(self) -> np.ndarray:
        r, n = self.shape
        out = np.zeros((r, n + 1))
        np.cumsum(self.x, axis=1, out=out[:, 1:])
        return out

    def path(self, i: int) -> EnvPath:
        return EnvPath.from_laws(
            [LinearFractionalLaw(a, p) for a, p in zip(self.a[i], self.p[i])])

    def head(self, n: int) -> "PathBatch":
        return PathBatch(self.a[:, :n], self.p[:, :n])

    def tail(self, start: int) -> "PathBatch":
        return PathBatch(self.a[:, start:], self.p[:, start:])


class BatchQuenched:
    """Quenched quantities for every path of a batch and every time ``0..n``.

    Construction checks the Markov bound ``P(Z_k > 0 | env) <= exp(min_{j<=k} S_j)``
    on every path and time and raises :class:`MarkovBoundViolation` otherwise.
    """

    def __init__(self, batch: PathBatch, check_markov: bool = True):
        self.batch = batch
        self.s = batch.s
        r, n = batch.shape
        self.n = n
        self._terms = batch.log_eta - self.s[:, :-1]
        self.log_a = np.empty((r, n + 1))
        self.log_a[:, 0] = -np.inf
        if n:
            np.logaddexp.accumulate(self._terms, axis=1, out=self.log_a[:, 1:])
        self.log_d = np.logaddexp(-self.s, self.log_a)
        if check_markov:
            self._check_markov()

    def _check_markov(self) -> None:
        running_min = np.minimum.accumulate(self.s, axis=1)
        excess = -self.log_d - running_min
        worst = float(excess.max()) if excess.size else -np.inf
        if worst > MARKOV_TOL:
            row = int(np.unravel_index(np.argmax(excess), excess.shape)[0])
            raise MarkovBoundViolation(
                f"log survival exceeds min S_k by {worst:.3e} on path {row}: "
                f"a={self.batch.a[row].tolist()}, p={self.batch.p[row].tolist()}")
        markov_checked_paths.add(excess.shape[0])

    def log_survival(self, k: int | None = None) -> np.ndarray:
        k = self.n if k is None else k
        return -self.log_d[:, k]

    def log_h(self, k: int | None = None) -> np.ndarray:
        k = self.n if k is None else k
        return self.log_a[:, k] - self.log_d[:, k]

    def log_one_minus_h(self, k: int | None = None) -> np.ndarray:
        k = self.n if k is None else k
        return -self.s[:, k] - self.log_d[:, k]

    def log_scaled_prob_eq(self, z, k: int | None = None) -> np.ndarray:
        """``log(exp(S_k) P(Z_k = z | env))`` with shape ``(R, len(z))``."""
        k = self.n if k is None else k
        z = np.atleast_1d(np.asarray(z, dtype=float))
        log_h = self.log_h(k)[:, None]
        with np.errstate(invalid="ignore"):
            tail = np.where(z[None, :] > 1, (z[None, :] - 1) * log_h, 0.0)
        return 2.0 * self.log_survival(k)[:, None] + tail

    @cached_property
    def _log_rev(self) -> np.ndarray:
        r = self.s.shape[0]
        out = np.full((r, self.n + 1), -np.inf)
        if self.n:
            out[:, :-1] = np.logaddexp.accumulate(self._terms[:, ::-1], axis=1)[:, ::-1]
        return out

    def suffix_log_survival(self, start) -> np.ndarray:
        """Survival to time ``n`` of one individual alive at time ``start``.

        ``start`` is an int or a per-path integer array.
        """
        r = self.s.shape[0]
        start = np.broadcast_to(np.asarray(start, dtype=np.int64), (r,))
        rows = np.arange(r)
        s_start = self.s[rows, start]
        log_rev = self._log_rev[rows, start]
        return -(s_start + np.logaddexp(-self.s[:, -1], log_rev))

    def log_one_minus_gen_fn(self, log_one_minus_x: np.ndarray, k: int) -> np.ndarray:
        """``log(1 - f_{0,k}(x))`` per path, given ``log(1 - x)`` per path.

        Uses ``1 / (1 - f_{0,k}(x)) = exp(-S_k) / (1 - x) + sum_{j<k} eta_{j+1} exp(-S_j)``.
        """
        return -np.logaddexp(-self.s[:, k] - log_one_minus_x, self.log_a[:, k])
