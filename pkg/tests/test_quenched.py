import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpre_lab.offspring_law import LinearFractionalLaw as L
from bpre_lab.quenched import (BatchQuenched, EnvPath, MarkovBoundViolation, PathBatch,
                               forward_simulate, iterate_gen_fn, log_prob_eq, prob_eq,
                               prob_eq_from, quenched_law, sub_path_gen_fn, survival_from)

TRUNC = 400


def brute_force_law(laws, z0=1):
    """Law of Z_n by explicit convolution powers of truncated offspring laws."""
    dist = np.zeros(TRUNC)
    dist[z0] = 1.0
    for law in laws:
        off = law.pmf(np.arange(TRUNC))
        new = np.zeros(TRUNC)
        power = np.zeros(TRUNC)
        power[0] = 1.0
        for j in range(TRUNC):
            if dist[j] > 1e-300:
                new += dist[j] * power
            power = np.convolve(power, off)[:TRUNC]
            if not power.any():
                break
        dist = new
    return dist


laws_st = st.builds(L, st.floats(0.0, 0.9), st.floats(0.02, 0.9))
paths_st = st.lists(laws_st, min_size=1, max_size=40).map(EnvPath.from_laws)

SMALL = [L(0.25, 0.5), L(0.5, 0.2), L(0.1, 0.3)]


def test_single_atom_two_generations():
    ql = quenched_law(EnvPath.from_laws([L(0.25, 0.5)] * 2))
    assert ql.survival == pytest.approx(9 / 14, abs=1e-15)
    assert prob_eq(ql, 1) == pytest.approx(9 / 49, abs=1e-15)


def test_zero_generations():
    ql = quenched_law(EnvPath.from_laws([]))
    assert ql.survival == 1.0 and ql.log_h is None
    with pytest.raises(ValueError):
        prob_eq(ql, 1)


def test_matches_brute_force_convolution():
    dist = brute_force_law(SMALL)
    ql = quenched_law(EnvPath.from_laws(SMALL))
    z = np.arange(1, 8)
    assert np.allclose(prob_eq(ql, z), dist[1:8], atol=1e-12, rtol=0)
    assert ql.extinction == pytest.approx(dist[0], abs=1e-12)


@pytest.mark.parametrize("z0", [1, 2, 3])
def test_prob_eq_from_matches_brute_force(z0):
    dist = brute_force_law(SMALL, z0)
    ql = quenched_law(EnvPath.from_laws(SMALL))
    k = np.arange(0, 8)
    assert np.allclose(prob_eq_from(ql, z0, k), dist[:8], atol=1e-12, rtol=0)
    assert survival_from(ql, z0) == pytest.approx(1 - dist[0], abs=1e-12)


def test_invalid_arguments():
    ql = quenched_law(EnvPath.from_laws(SMALL))
    with pytest.raises(ValueError):
        log_prob_eq(ql, 0)
    with pytest.raises(ValueError):
        prob_eq_from(ql, 0, 1)
    with pytest.raises(IndexError):
        sub_path_gen_fn(EnvPath.from_laws(SMALL), 2, 1, 0.0)


@settings(max_examples=200, deadline=None)
@given(paths_st)
def test_survival_equals_one_minus_composed_generating_function(path):
    ql = quenched_law(path)
    assert abs(ql.survival - (1 - iterate_gen_fn(path, 0.0))) < 1e-12


@settings(max_examples=200, deadline=None)
@given(paths_st)
def test_quenched_law_is_a_probability_distribution(path):
    ql = quenched_law(path)
    assert 0 <= ql.h <= 1
    # survival = sum_z P(Z_n = z), a geometric series
    total = math.exp(ql.log_e_sn + 2 * ql.log_survival - ql.log_one_minus_h)
    assert total == pytest.approx(ql.survival, rel=1e-10)
    assert ql.log_survival <= min(path.s) + 1e-12


@settings(max_examples=100, deadline=None)
@given(paths_st, st.integers(1, 30))
def test_geometric_tail_ratio(path, z):
    ql = quenched_law(path)
    ratio = math.exp(log_prob_eq(ql, z + 1) - log_prob_eq(ql, z))
    assert abs(ratio - ql.h) < 1e-12


def _random_batch(seed, r=50, n=30):
    rng = np.random.default_rng(seed)
    return PathBatch(rng.uniform(0, 0.9, (r, n)), rng.uniform(0.02, 0.9, (r, n)))


def test_batch_agrees_with_scalar_laws():
    batch = _random_batch(1)
    bq = BatchQuenched(batch)
    for i in (0, 7, 49):
        for k in (1, 12, 30):
            ql = quenched_law(batch.path(i)[:k])
            assert bq.log_survival(k)[i] == pytest.approx(ql.log_survival, abs=1e-12)
            assert bq.log_h(k)[i] == pytest.approx(ql.log_h, abs=1e-12)
            assert bq.log_scaled_prob_eq([1, 3], k)[i, 1] == pytest.approx(
                log_prob_eq(ql, 3) + batch.s[i, k], abs=1e-10)


def test_suffix_survival_matches_shifted_path():
    batch = _random_batch(2)
    bq = BatchQuenched(batch)
    starts = np.arange(50) % 31
    got = bq.suffix_log_survival(starts)
    for i in (0, 5, 30):
        tail = batch.path(i)[int(starts[i]):]
        want = quenched_law(tail).log_survival
        assert got[i] == pytest.approx(want, abs=1e-12)


def test_log_one_minus_gen_fn_matches_composition():
    batch = _random_batch(3, r=5, n=10)
    bq = BatchQuenched(batch)
    x = np.linspace(0.1, 0.9, 5)
    got = bq.log_one_minus_gen_fn(np.log1p(-x), 6)
    for i in range(5):
        want = 1 - sub_path_gen_fn(batch.path(i), 0, 6, x[i])
        assert math.exp(got[i]) == pytest.approx(want, abs=1e-13)


def test_markov_violation_is_reported():
    bq = BatchQuenched(_random_batch(4), check_markov=False)
    bq.log_d[3, 5] = -(min(bq.s[3, :6]) + 0.5)
    with pytest.raises(MarkovBoundViolation, match="path 3"):
        bq._check_markov()


def test_forward_simulation_single_generation():
    path = EnvPath.from_laws([L(0.25, 0.5)])
    res = forward_simulate(path, 1, np.random.default_rng(0), runs=100_000)
    freq = np.mean(res.trajectories[:, 1] == 1)
    assert abs(freq - 0.375) < 4 * math.sqrt(0.375 * 0.625 / 100_000)


def test_forward_simulation_cap_marks_truncation():
    path = EnvPath.from_laws([L(0.0, 0.9)] * 6)
    res = forward_simulate(path, 5, np.random.default_rng(1), runs=20, cap=50)
    assert res.truncated.any()
    row = int(np.flatnonzero(res.truncated)[0])
    first = int(np.argmax(res.trajectories[row] > 50))
    assert np.all(res.trajectories[row, first + 1:] == -1)
