"""Strongly supercritical regime.

When the tilted walk still drifts upward, gamma**-n P(Z_n = 1) converges to a
positive constant, and given Z_n = 1 the population at an interior time has a
limit law r_z that does not depend on where in (0, 1) we look.
"""

import numpy as np

from bpre_lab import FiniteMixture, LinearFractionalLaw, regime_report
from bpre_lab import experiments as ex

env = FiniteMixture((LinearFractionalLaw(0.25, 0.5), LinearFractionalLaw(0.5, 0.2)), (0.95, 0.05))
rep = regime_report(env)
print(f"regime: {rep.regime}, tilted drift {rep.drift_tilted:.3f}, gamma {rep.gamma:.4f}")

rate = ex.check_strong_rate(env, [10, 20, 40, 80], 200_000, seed=1)
for n, est in zip(rate.n_grid, rate.r_hat):
    print(f"  gamma^-{n} P(Z_{n} = 1) = {est.value:.5f} +- {est.stderr:.5f}")

single = ex.check_strong_rate(FiniteMixture.single(0.25, 0.5), [80], 10, seed=1)
print(f"single atom: {single.vartheta.value:.6f}, fixed point gives (1 - 1/2)^2 = 0.25")

path = ex.check_strong_conditional_path(env, 60, 0.5, 10, 120, 200_000, seed=2, t_pair=(0.3, 0.7))
print("\n z   P(Z_30 = z | Z_60 = 1)   r_z")
for z, lhs, r in zip(path.lhs.support, path.lhs.masses, path.r_hat.masses):
    print(f"{z:2d}   {lhs:.4f}                  {r:.4f}")
print(f"TV = {path.tv:.4f}; TV between t = 0.3 and t = 0.7: {path.t_independence['tv']:.4f}")
