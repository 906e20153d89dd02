import math

import numpy as np
import pytest

from bpre_lab.environment import FiniteMixture, ExternalSampler
from bpre_lab.fluctuation import (InfeasibleConditioning, normal_increments, prob_min_nonneg,
                                  renewal_u, rescale_path, sample_conditioned_nonneg,
                                  sparre_andersen, walk_stats)
from bpre_lab.offspring_law import LinearFractionalLaw as L


def test_walk_stats_by_hand():
    st = walk_stats([1.0, -2.0, 0.5, -1.0, 2.0], k=2)
    # S = 0, 1, -1, -0.5, -1.5, 0.5
    assert st.l_n == -1.5 and st.m_n == 1.0
    assert st.tau_n == 4
    assert st.tau_k_n == 4 and st.l_k_n == pytest.approx(-0.5)


def test_walk_stats_first_minimum_on_ties():
    st = walk_stats([-1.0, 1.0, -1.0])
    assert st.tau_n == 1


def test_walk_stats_window_bounds():
    with pytest.raises(IndexError):
        walk_stats([1.0, 2.0], k=3)


def test_sparre_andersen_small_values():
    assert sparre_andersen(1) == pytest.approx(0.5)
    assert sparre_andersen(2) == pytest.approx(3 / 8)
    assert sparre_andersen(3) == pytest.approx(5 / 16)


def test_prob_min_nonneg_normal_walk():
    est = prob_min_nonneg(normal_increments, 3, 100_000, seed=1)
    assert est.within(5 / 16, 4)


def test_prob_min_nonneg_needs_steps():
    with pytest.raises(ValueError):
        prob_min_nonneg(normal_increments, 0, 10, seed=1)


def _simple_walk(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape)


def test_renewal_function_at_origin_and_below():
    assert renewal_u(_simple_walk, -0.5, 50, 1000, seed=0).u_hat == 0.0
    est = renewal_u(_simple_walk, 0.0, 50, 1000, seed=0)
    assert est.u_hat == 1.0 and est.stderr == 0.0


def test_renewal_function_simple_walk():
    # descending ladder heights of the simple walk are all 1, so u(1.5) = 2,
    # approached from below as the truncation grows
    est = renewal_u(_simple_walk, 1.5, 400, 20_000, seed=2)
    assert 1.9 < est.u_hat <= 2.0 + 4 * est.stderr
    assert est.tail_bound_estimate >= 0


def test_conditioned_sampler_stays_nonnegative(intermediate_mix):
    sample = sample_conditioned_nonneg(intermediate_mix.tilt(), 20, np.random.default_rng(3), size=500)
    assert sample.paths.shape == (500, 20)
    assert np.all(sample.paths.s[:, 1:] >= 0)
    assert 0 < sample.acceptance_rate <= 1
    assert sample.horizon_extension == 80


def test_conditioned_sampler_reports_infeasibility():
    env = FiniteMixture((L(0.25, 0.5), L(0.6, 0.1)), (0.2, 0.8))
    with pytest.raises(InfeasibleConditioning):
        sample_conditioned_nonneg(env.tilt(), 50, np.random.default_rng(0), size=10,
                                  max_rejects=1000, chunk=1024)


def test_conditioned_sampler_needs_exact_tilt():
    ext = ExternalSampler(lambda rng, shape: (np.full(shape, 0.25), np.full(shape, 0.5)))
    with pytest.raises(NotImplementedError):
        sample_conditioned_nonneg(ext.tilt(1000), 5, np.random.default_rng(0))


def test_rescaled_path():
    path = rescale_path(np.ones(4), sigma=2.0)
    assert path(1.0) == pytest.approx(4 / (2 * 2))
    assert path(0.5) == pytest.approx(2 / 4)
    stable = rescale_path(np.ones(8), alpha=1.5, slowly_varying=2.0)
    assert stable(1.0) == pytest.approx(2 * 8 / 8 ** (1 / 1.5))
