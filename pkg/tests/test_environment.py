import math

import numpy as np
import pytest

from bpre_lab.environment import (INTERMEDIATE, OTHER, STRONG, ExternalSampler, FiniteMixture,
                                  NoBracketError, calibrate_intermediate, regime_report,
                                  sample_env_path)
from bpre_lab.offspring_law import LinearFractionalLaw as L


def test_gamma_and_tilt_of_half_mixture(half_mix):
    # exp(-X) is 2/3 and 8/5 on the two atoms
    assert half_mix.gamma() == pytest.approx(17 / 15)
    tilted = half_mix.tilt()
    assert tilted.mode == "exact"
    assert tilted.weights == pytest.approx((5 / 17, 12 / 17))


def test_single_atom_regime(single_atom):
    rep = regime_report(single_atom)
    assert rep.regime == STRONG
    assert rep.gamma == pytest.approx(2 / 3)
    assert rep.drift_tilted == pytest.approx(math.log(1.5))


def test_subcritical_atom_is_other():
    assert regime_report(FiniteMixture.single(0.5, 0.2)).regime == OTHER


def test_critical_atom_is_not_intermediate():
    # m = 1 gives E[X exp(-X)] = 0 but no supercriticality
    assert regime_report(FiniteMixture.single(0.3, 0.3)).regime == OTHER


def test_calibration_solves_zero_tilted_drift():
    env = calibrate_intermediate([L(0.25, 0.5), L(0.5, 0.2)])
    assert env.weights[0] == pytest.approx(0.7355904592, abs=1e-9)
    rep = regime_report(env)
    assert rep.regime == INTERMEDIATE
    assert abs(rep.tilted_mean_x_exp) < 1e-12
    assert rep.drift_original > 0


@pytest.mark.parametrize("free, index", [("a", 1), ("p", 1)])
def test_calibration_on_parameters(free, index):
    env = calibrate_intermediate([L(0.25, 0.5), L(0.5, 0.2)], free=free, index=index)
    assert abs(env.expectation(env.x * np.exp(-env.x))) < 1e-12


def test_calibration_without_sign_change():
    with pytest.raises(NoBracketError):
        calibrate_intermediate([L(0.25, 0.5), L(0.1, 0.6)])


def test_invalid_weights():
    with pytest.raises(ValueError):
        FiniteMixture((L(0.2, 0.3), L(0.3, 0.2)), (0.5, 0.6))
    with pytest.raises(ValueError):
        FiniteMixture((L(0.2, 0.3),), (0.5, 0.5))


def test_records_round_trip(half_mix):
    assert FiniteMixture.from_records(half_mix.to_records()) == half_mix


def test_tilted_sampling_frequencies(half_mix):
    batch = half_mix.tilt().sample_batch(np.random.default_rng(2), 20_000, 10)
    freq = np.mean(batch.a == 0.25)
    assert abs(freq - 5 / 17) < 4 * math.sqrt(5 / 17 * 12 / 17 / 200_000)


def test_sampling_is_seed_deterministic(half_mix):
    a = sample_env_path(half_mix, 30, np.random.default_rng(4))
    b = sample_env_path(half_mix, 30, np.random.default_rng(4))
    assert a.laws == b.laws
    assert sample_env_path(half_mix, 0, np.random.default_rng(4)).n == 0


def _external(mix, **kw):
    def draw(rng, shape):
        idx = mix.sample_indices(rng, shape)
        return mix.a[idx], mix.p[idx]
    return ExternalSampler(draw, **kw)


def test_external_sampler_gamma(half_mix):
    est = _external(half_mix).gamma(200_000, seed=3)
    assert est.within(17 / 15, 4)


def test_external_sampler_regime(half_mix):
    assert regime_report(_external(half_mix), replicates=100_000).regime == regime_report(half_mix).regime


def test_external_tilt_modes(half_mix):
    assert _external(half_mix).tilt(10_000).mode == "snis"
    with pytest.raises(NotImplementedError):
        _external(half_mix, supports_weights=False).tilt()
    with pytest.raises(NotImplementedError):
        _external(half_mix).tilt(10_000).sample_batch(np.random.default_rng(0), 2, 2)
