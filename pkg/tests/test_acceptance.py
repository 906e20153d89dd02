"""Acceptance criteria at desk scale.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts the same condition.
"""

import json
import math

import numpy as np
import pytest

from bpre_lab import experiments as ex
from bpre_lab.cli import main
from bpre_lab.environment import FiniteMixture
from bpre_lab.fluctuation import normal_increments, prob_min_nonneg, sparre_andersen
from bpre_lab.offspring_law import LinearFractionalLaw as L
from bpre_lab.quenched import (BatchQuenched, EnvPath, PathBatch, forward_simulate,
                               iterate_gen_fn, log_prob_eq, markov_checked_paths, quenched_law)

from .conftest import ACCEPTANCE_LINES

SEED = 20261015
R = 10 ** 6


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:02d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_closed_form_equivalence():
    rng = np.random.default_rng(SEED)
    worst_gen, worst_ratio = 0.0, 0.0
    for _ in range(1000):
        k = rng.integers(1, 5)
        atoms = [L(rng.uniform(0, 0.9), rng.uniform(0.02, 0.9)) for _ in range(k)]
        idx = rng.integers(0, k, rng.integers(1, 51))
        path = EnvPath.from_laws([atoms[i] for i in idx])
        ql = quenched_law(path)
        worst_gen = max(worst_gen, abs(ql.survival - (1 - iterate_gen_fn(path, 0.0))))
        z = int(rng.integers(1, 20))
        ratio = math.exp(log_prob_eq(ql, z + 1) - log_prob_eq(ql, z))
        worst_ratio = max(worst_ratio, abs(ratio - ql.h))
    record(1, "closed-form equivalence", worst_gen < 1e-12 and worst_ratio < 1e-12,
           f"max |survival - (1 - f(0))| = {worst_gen:.2e}, max |ratio - H| = {worst_ratio:.2e} "
           f"over 1000 paths")


def test_enumeration_oracle(half_mix):
    zs = [1, 2, 3, 4, 5]
    worst = 0.0
    for n in range(1, 9):
        exact = ex.exact_annealed_point_prob(half_mix, n, zs)
        for est, want in zip(ex.annealed_point_probs(half_mix, n, zs, 10 ** 5, SEED + n), exact):
            worst = max(worst, abs(est.value - want) / est.stderr)
    record(2, "brute-force enumeration", worst < 4,
           f"max |MC - exact| / se = {worst:.2f} over n = 1..8, z = 1..5 (limit 4)")


def test_forward_simulation(single_atom):
    path = EnvPath.from_laws([L(0.25, 0.5)] * 2)
    res = forward_simulate(path, 1, np.random.default_rng(SEED), runs=R)
    z2 = res.trajectories[:, 2]
    p1 = float(np.mean(z2 == 1))
    se_p = math.sqrt(p1 * (1 - p1) / R)
    mean, se_m = float(z2.mean()), float(z2.std(ddof=1) / math.sqrt(R))
    dev_p, dev_m = abs(p1 - 9 / 49) / se_p, abs(mean - 2.25) / se_m
    record(3, "forward simulation", dev_p < 4 and dev_m < 4 and not res.truncated.any(),
           f"P(Z_2=1) = {p1:.5f} ({dev_p:.2f} se from 9/49), E Z_2 = {mean:.4f} "
           f"({dev_m:.2f} se from 2.25)")


def test_sparre_andersen():
    worst = 0.0
    for n in (1, 2, 5, 10, 100):
        est = prob_min_nonneg(normal_increments, n, R, SEED)
        worst = max(worst, abs(est.value - sparre_andersen(n)) / est.stderr)
    record(5, "Sparre-Andersen", worst < 4, f"max deviation {worst:.2f} se over n in 1,2,5,10,100")


def test_strong_rate(single_atom, strong_mix):
    s_star = ex.fixed_point_extinction(L(0.25, 0.5), tol=1e-13)
    vartheta = (1 - s_star) ** 2
    det = ex.check_strong_rate(single_atom, [30, 60], 10, SEED)
    gap_det = abs(det.vartheta.value - vartheta)
    rep = ex.check_strong_rate(strong_mix, [15, 30, 60], R, SEED)
    ok = (abs(s_star - 0.5) < 1e-12 and gap_det < 1e-3 and rep.checks["r_hat_nonincreasing"]
          and rep.stabilization_gap < 3 * rep.stabilization_se)
    record(6, "strong rate", ok,
           f"single atom |r(60) - 0.25| = {gap_det:.2e}; two atoms r = "
           f"{[round(e.value, 5) for e in rep.r_hat]}, |r(60) - r(30)| = "
           f"{rep.stabilization_gap:.2e} vs 3 se = {3 * rep.stabilization_se:.2e} "
           f"(paired se {rep.stabilization_paired_se:.2e})")


def test_uniform_conditional(strong_mix, intermediate_mix):
    strong = ex.check_uniform_conditional(strong_mix, 60, 5, R, SEED)
    inter = ex.check_uniform_conditional(intermediate_mix, 200, 5, R, SEED)
    record(7, "uniform conditional law", strong.max_deviation < 0.03 and inter.max_deviation < 0.03,
           f"max |mass - 1/5| = {strong.max_deviation:.2e} (strong, n=60), "
           f"{inter.max_deviation:.2e} (intermediate, n=200)")


def test_strong_conditional_path(strong_mix):
    rep = ex.check_strong_conditional_path(strong_mix, 60, 0.5, 20, 120, R, SEED, t_pair=(0.3, 0.7))
    tpair = rep.t_independence
    ok = rep.tv < 0.05 and tpair["tv"] < 3 * tpair["se"]
    record(8, "strong conditional path", ok,
           f"TV(law at t=0.5, r) = {rep.tv:.2e}; TV(t=0.3, t=0.7) = {tpair['tv']:.2e} vs "
           f"3 se = {3 * tpair['se']:.2e}; r horizon gap {rep.horizon_gap:.1e}")


def test_intermediate_rate(intermediate_mix):
    rep = ex.check_intermediate_rate(intermediate_mix, [100, 200, 400], R, SEED)
    ok = rep.checks["theta_positive"] and rep.theta_gap < 3 * rep.theta_gap_se \
        and rep.scaling_gap < 3 * rep.scaling_gap_se
    record(9, "intermediate rate", ok,
           f"theta = {[round(e.value, 4) for e in rep.theta_hat]}, |theta(400) - theta(200)| = "
           f"{rep.theta_gap:.2e} vs 3 se = {3 * rep.theta_gap_se:.2e} (paired se "
           f"{rep.theta_gap_paired_se:.2e}); sqrt(n) P(L_n >= 0) gap "
           f"{rep.scaling_gap:.2e} vs {3 * rep.scaling_gap_se:.2e}")


def test_meander(intermediate_mix):
    rep = ex.check_meander(intermediate_mix, 400, R, SEED)
    record(10, "meander endpoint", rep.ks_distance < 0.05 and rep.negative_mass < 0.02,
           f"weighted KS to Rayleigh = {rep.ks_distance:.4f}, negative mass = "
           f"{rep.negative_mass:.2e}, ESS = {rep.effective_sample_size:.0f}")


def test_minimum_conditional(intermediate_mix):
    rep = ex.check_minimum_conditional(intermediate_mix, 400, 0.5, 20, 100, R, SEED,
                                       rhs_replicates=10 ** 5)
    tv_double = ex.tv_distance(rep.lhs, rep.q_hat_double)[0]
    normalized = abs(rep.q_sum + rep.q_tail - 1) < 1e-9
    record(11, "population at running minimum", rep.tv < 0.07 and normalized,
           f"TV(law, q at M=100) = {rep.tv:.3f}, at M=200 = {tv_double:.3f}; sum q = "
           f"{rep.q_sum:.4f} + tail {rep.q_tail:.4f}; P(Z <= 10) = {rep.mass_up_to_10:.3f}; "
           f"acceptance {rep.acceptance_rate:.4f}")


def test_early_minimum(intermediate_mix):
    rep = ex.check_early_minimum(intermediate_mix, 400, [1, 3], [0, 1, 2, 5, 10, 20, 50, 100, 400],
                                 R, SEED)
    at20 = max(est.value for ests in rep.ratios.values() for est in ests[5:6])
    ok = rep.checks["ratio_nonincreasing_in_m"] and at20 < 0.1
    record(12, "early minimum", ok, f"max ratio at m=20 = {at20:.4f}; monotone in m: "
           f"{rep.checks['ratio_nonincreasing_in_m']}; z-insensitive: {rep.checks['z_insensitive']}")


def _run_twice(fn):
    return json.dumps(fn(1)), json.dumps(fn(4))


def test_determinism(tmp_path, strong_mix, intermediate_mix):
    runs = {
        "strong-rate": lambda w: ex.check_strong_rate(strong_mix, [20, 40], 40_000, 3, w).to_dict(),
        "meander": lambda w: ex.check_meander(intermediate_mix, 100, 40_000, 3, w).to_dict(),
        "minimum-conditional": lambda w: ex.check_minimum_conditional(
            intermediate_mix, 100, 0.5, 10, 20, 40_000, 3, rhs_replicates=5000, workers=w).to_dict(),
        "theta-series": lambda w: ex.estimate_theta_series(intermediate_mix, 10, 20, 5000, 3,
                                                           workers=w).to_dict(),
    }
    same = {name: len(set(_run_twice(fn))) == 1 for name, fn in runs.items()}
    cfg = tmp_path / "c.yaml"
    cfg.write_text("environment: [{a: 0.25, p: 0.5, weight: 0.95}, {a: 0.5, p: 0.2, weight: 0.05}]\n"
                   "seed: 9\nn: 40\nc: 5\nreplicates: 30000\n")
    texts = []
    for workers in ("1", "4"):
        out = tmp_path / f"o{workers}.csv"
        main(["run", "uniform-conditional", "--config", str(cfg), "--out", str(out),
              "--workers", workers, "--format", "csv"])
        texts.append("\n".join(l for l in out.read_text().splitlines() if "timestamp" not in l))
    same["cli"] = texts[0] == texts[1]
    record(13, "determinism", all(same.values()),
           f"identical output at 1 and 4 workers: {same}")


def test_markov_bound_on_every_path():
    # a sweep over random environments of every regime, on top of all paths
    # already checked by the experiments above
    rng = np.random.default_rng(SEED)
    before = markov_checked_paths.value
    for _ in range(50):
        a = rng.uniform(0, 0.95, (200, 300))
        p = rng.uniform(0.01, 0.95, (200, 300))
        BatchQuenched(PathBatch(a, p))
    swept = markov_checked_paths.value - before
    record(4, "Markov bound", swept == 10_000,
           f"zero violations on {markov_checked_paths.value} checked paths "
           f"({swept} from the random sweep)")
