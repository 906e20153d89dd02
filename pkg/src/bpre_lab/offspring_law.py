"""Linear-fractional offspring distributions.

A law with parameters ``(a, p)`` puts mass ``a`` on zero and a geometric tail
``(1 - a)(1 - p) p**(k - 1)`` on ``k >= 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LinearFractionalLaw:
    """Offspring law with extinction mass ``a`` and tail ratio ``p``."""

    a: float
    p: float

    def __post_init__(self) -> None:
        a, p = float(self.a), float(self.p)
        if not (0.0 <= a < 1.0):
            raise ValueError(f"a must lie in [0, 1), got {self.a!r}")
        if not (0.0 < p < 1.0):
            raise ValueError(f"p must lie in (0, 1), got {self.p!r}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "p", p)

    def pmf(self, k):
        """Probability of ``k`` offspring; ``k`` may be an integer array."""
        k_arr = np.asarray(k)
        if np.any(k_arr < 0):
            raise ValueError("k must be nonnegative")
        q1 = (1.0 - self.a) * (1.0 - self.p)
        # p**(k-1) through the log keeps far tails from drifting
        tail = q1 * np.exp((np.maximum(k_arr, 1) - 1) * math.log(self.p))
        out = np.where(k_arr == 0, self.a, tail)
        return float(out) if out.ndim == 0 else out

    def mean(self) -> float:
        return (1.0 - self.a) / (1.0 - self.p)

    def log_mean(self) -> float:
        """Increment ``log m`` of the associated random walk."""
        return math.log1p(-self.a) - math.log1p(-self.p)

    def eta(self) -> float:
        """Standardized second factorial moment ``f''(1) / (2 m**2)``."""
        return self.p / (1.0 - self.a)

    def gen_fn(self, s):
        s_arr = np.asarray(s, dtype=float)
        if np.any((s_arr < 0.0) | (s_arr > 1.0)):
            raise ValueError("generating function argument must lie in [0, 1]")
        out = self.a + (1.0 - self.a) * (1.0 - self.p) * s_arr / (1.0 - self.p * s_arr)
        return float(out) if out.ndim == 0 else out

    def series_horizon(self, tol: float = 1e-15) -> int:
        """Smallest ``K`` with ``p**K < tol``; truncating there bounds the tail mass by ``tol``."""
        return int(math.floor(math.log(tol) / math.log(self.p))) + 1

    def sample(self, rng: np.random.Generator, size=None):
        """Draw offspring counts: 0 with probability ``a``, else ``1 + Geometric``."""
        alive = rng.random(size) >= self.a
        # numpy's geometric counts trials, so its support already starts at 1
        counts = rng.geometric(1.0 - self.p, size)
        out = np.where(alive, counts, 0)
        return int(out) if size is None else out
