"""Exact quenched laws versus brute-force simulation.

In a fixed environment a linear-fractional process stays linear fractional,
so the law of Z_n is known in closed form. Here we compare it with forward
simulation in one sampled environment.
"""

import numpy as np

from bpre_lab import FiniteMixture, LinearFractionalLaw, prob_eq, quenched_law, sample_env_path
from bpre_lab.quenched import forward_simulate, iterate_gen_fn

env = FiniteMixture((LinearFractionalLaw(0.25, 0.5), LinearFractionalLaw(0.5, 0.2)), (0.5, 0.5))
rng = np.random.default_rng(1)
path = sample_env_path(env, 8, rng)
print("environment:", [(law.a, law.p) for law in path.laws])
print("walk S_k:   ", np.round(path.s, 3))

ql = quenched_law(path)
print(f"\nP(Z_8 > 0 | env) = {ql.survival:.6f}   1 - f_0,8(0) = {1 - iterate_gen_fn(path, 0.0):.6f}")
print(f"geometric ratio H_8 = {ql.h:.6f}")

runs = 400_000
sim = forward_simulate(path, 1, rng, runs=runs).trajectories[:, -1]
print("\n z   exact      simulated")
for z in range(0, 6):
    exact = ql.extinction if z == 0 else prob_eq(ql, z)
    print(f"{z:2d}   {exact:.5f}    {np.mean(sim == z):.5f}")
