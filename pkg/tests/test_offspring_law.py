import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bpre_lab.offspring_law import LinearFractionalLaw

laws = st.builds(LinearFractionalLaw, st.floats(0.0, 0.95), st.floats(0.01, 0.9))


def test_pmf_of_reference_law():
    law = LinearFractionalLaw(0.25, 0.5)
    assert law.pmf(0) == 0.25
    assert law.pmf(1) == pytest.approx(0.375)
    assert law.pmf(3) == pytest.approx(0.75 * 0.5 * 0.25)


def test_reference_law_moments():
    law = LinearFractionalLaw(0.25, 0.5)
    assert law.mean() == pytest.approx(1.5)
    assert law.log_mean() == pytest.approx(math.log(1.5))
    assert law.eta() == pytest.approx(2 / 3)


@given(laws)
def test_pmf_sums_to_one_and_matches_mean(law):
    k = np.arange(law.series_horizon() + 1)
    pmf = law.pmf(k)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
    assert (k * pmf).sum() == pytest.approx(law.mean(), rel=1e-9)


@given(laws)
def test_eta_is_scaled_second_factorial_moment(law):
    k = np.arange(law.series_horizon(1e-16) + 1)
    second = (k * (k - 1) * law.pmf(k)).sum()
    assert second / (2 * law.mean() ** 2) == pytest.approx(law.eta(), rel=1e-8)


@given(laws, st.floats(0.0, 1.0))
def test_generating_function_matches_series(law, s):
    k = np.arange(law.series_horizon() + 1)
    assert law.gen_fn(s) == pytest.approx((law.pmf(k) * s ** k).sum(), abs=1e-12)


def test_generating_function_at_endpoints():
    law = LinearFractionalLaw(0.3, 0.4)
    assert law.gen_fn(0.0) == 0.3
    assert law.gen_fn(1.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        law.gen_fn(1.5)


@pytest.mark.parametrize("a, p", [(1.0, 0.5), (-0.1, 0.5), (0.2, 0.0), (0.2, 1.0)])
def test_invalid_parameters(a, p):
    with pytest.raises(ValueError):
        LinearFractionalLaw(a, p)


def test_negative_count_rejected():
    with pytest.raises(ValueError):
        LinearFractionalLaw(0.2, 0.3).pmf(-1)


def test_sampler_frequencies():
    law = LinearFractionalLaw(0.25, 0.5)
    draws = law.sample(np.random.default_rng(7), 200_000)
    for k in range(4):
        freq = np.mean(draws == k)
        se = math.sqrt(law.pmf(k) * (1 - law.pmf(k)) / len(draws))
        assert abs(freq - law.pmf(k)) < 4 * se
    assert isinstance(law.sample(np.random.default_rng(1)), int)
