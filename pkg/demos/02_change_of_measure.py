"""Rare events through the exponential change of measure.

P(Z_n = 1) decays like gamma**n. Under the tilted environment law it becomes
gamma**n times an O(1) expectation, which Monte Carlo handles easily. For
short horizons the answer can be checked by enumerating every environment word.
"""

from bpre_lab import FiniteMixture, LinearFractionalLaw, regime_report
from bpre_lab.experiments import annealed_point_probs, exact_annealed_point_prob

env = FiniteMixture((LinearFractionalLaw(0.25, 0.5), LinearFractionalLaw(0.5, 0.2)), (0.5, 0.5))
rep = regime_report(env)
print(f"gamma = {rep.gamma:.6f} (17/15 = {17 / 15:.6f}), tilted weights = {env.tilt().weights}")

print("\n n   exact P(Z_n=1)   estimate        se")
for n in (1, 2, 4, 8):
    exact = exact_annealed_point_prob(env, n, [1])[0]
    est = annealed_point_probs(env, n, [1], 100_000, seed=n)[0]
    print(f"{n:2d}   {exact:.6e}    {est.value:.6e}   {est.stderr:.1e}")

# in a supercritical environment the tilted expectation stays of order one,
# so only gamma**n underflows and the log value remains exact
strong = FiniteMixture((LinearFractionalLaw(0.25, 0.5), LinearFractionalLaw(0.5, 0.2)), (0.95, 0.05))
far = annealed_point_probs(strong, 5000, [1], 20_000, seed=0)[0]
print(f"\nstrong env, n = 5000: value underflows to {far.value}, "
      f"log P(Z_n=1) = {far.log_value:.2f}")
