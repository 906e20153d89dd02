"""Intermediately supercritical regime.

Calibrating the mixing weight so that E[X exp(-X)] = 0 makes the tilted walk
centered. Then P(Z_n = 1) ~ theta gamma**n P(L_n >= 0), the walk seen from
{Z_n = 1} looks like a Brownian meander, and at its running minima the
population is small.
"""

import numpy as np

from bpre_lab import LinearFractionalLaw as L
from bpre_lab import calibrate_intermediate, regime_report
from bpre_lab import experiments as ex

env = calibrate_intermediate([L(0.05, 0.7), L(0.7, 0.1), L(0.2, 0.45)])
rep = regime_report(env)
print(f"calibrated weights {np.round(env.weights, 5)}, regime {rep.regime}, "
      f"tilted sigma {np.sqrt(rep.variance_tilted):.3f}")

rate = ex.check_intermediate_rate(env, [50, 100, 200], 200_000, seed=1)
for n, th, sq in zip(rate.n_grid, rate.theta_hat, rate.sqrt_n_prob_nonneg):
    print(f"  n = {n:3d}: theta = {th.value:.4f} +- {th.stderr:.4f}, "
          f"sqrt(n) P(L_n >= 0) = {sq.value:.4f}")

mea = ex.check_meander(env, 200, 200_000, seed=2)
print(f"\nS_n / (sigma sqrt n) given Z_n = 1: KS distance to Rayleigh {mea.ks_distance:.3f} "
      f"(effective sample size {mea.effective_sample_size:.0f})")

mc = ex.check_minimum_conditional(env, 200, 0.5, 10, 50, 200_000, seed=3, rhs_replicates=10_000)
print("\n z   P(Z_tau = z | Z_n = 1)   q(z)")
for z, lhs, q in zip(mc.lhs.support, mc.lhs.masses, mc.q_hat.masses):
    print(f"{z:2d}   {lhs:.4f}                  {q:.4f}")
print(f"TV = {mc.tv:.4f}, P(Z_tau <= 10 | Z_n = 1) = {mc.mass_up_to_10:.3f}")
