import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtvsr.estimation import (
    FitError,
    K_LAMBDA,
    fit_rician_mixture,
    lambda_heuristic,
    noise_percentage,
    noise_precision,
    rician_logpdf,
)
from mtvsr.volume import Volume
from problems import rician_image
from scipy import integrate, special


def test_logpdf_matches_direct_formula_and_integrates_to_one():
    x = np.linspace(0.1, 30, 50)
    nu, s = 7.0, 2.5
    direct = x / s**2 * np.exp(-(x**2 + nu**2) / (2 * s**2)) * special.i0(x * nu / s**2)
    assert np.allclose(np.exp(rician_logpdf(x, nu, s)), direct, rtol=1e-10)
    total, _ = integrate.quad(lambda t: math.exp(rician_logpdf(t, nu, s)), 0, 60)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_logpdf_large_argument_is_finite():
    assert np.isfinite(rician_logpdf(1e4, 1e4, 1.0))


def test_pure_background_sigma_recovered():
    est = [fit_rician_mixture(Volume(rician_image(s, 5.0, tissue_fraction=0.0))).air.sigma for s in range(20)]
    assert abs(np.mean(est) - 5.0) / 5.0 <= 0.05


@pytest.mark.parametrize("pct", [1.0, 2.5, 5.0, 10.0])
def test_two_class_noise_percentage(pct):
    est = [noise_percentage(fit_rician_mixture(rician_image(s, pct))) for s in range(20)]
    assert abs(np.mean(est) - pct) / pct <= 0.15


def test_precision_within_thirty_percent():
    fit = fit_rician_mixture(rician_image(3, 5.0))
    assert noise_precision(fit) == pytest.approx(fit.tau)
    assert abs(fit.tau - 1 / 25) / (1 / 25) <= 0.3


def test_air_is_smaller_nu_and_weights_sum_to_one():
    fit = fit_rician_mixture(rician_image(0, 5.0))
    assert fit.air.nu < fit.tissue.nu
    assert sum(c.weight for c in fit.components) == pytest.approx(1.0)
    assert fit.mu_tissue == pytest.approx(100, rel=0.02)


def test_log_likelihood_is_monotone():
    fit = fit_rician_mixture(rician_image(1, 5.0))
    ll = np.array(fit.trace)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:]))


def test_swapped_initialisation_gives_same_air():
    x = rician_image(2, 5.0)
    a = fit_rician_mixture(x)
    b = fit_rician_mixture(x, init=[(100.0, 25.0, 0.5), (0.0, 10.0, 0.5)])
    assert b.air_index == 1
    assert a.air.nu == pytest.approx(b.air.nu, abs=1e-3)
    assert a.air.sigma == pytest.approx(b.air.sigma, rel=1e-3)


@settings(max_examples=8, deadline=None)
@given(scale=st.floats(0.05, 50.0), seed=st.integers(0, 100))
def test_intensity_scaling(scale, seed):
    x = rician_image(seed, 5.0)
    a = fit_rician_mixture(x)
    b = fit_rician_mixture(x * scale)
    assert b.air.sigma == pytest.approx(a.air.sigma * scale, rel=0.02)
    assert b.mu_tissue == pytest.approx(a.mu_tissue * scale, rel=0.02)
    assert lambda_heuristic(b.mu_tissue) == pytest.approx(lambda_heuristic(a.mu_tissue) / scale, rel=0.02)
    assert b.tau == pytest.approx(a.tau / scale**2, rel=0.04)


def test_masked_voxels_ignored():
    x = rician_image(4, 5.0)
    mask = np.zeros(x.shape, bool)
    mask[:4] = True
    poisoned = x.copy()
    poisoned[:4] = 1e6
    a = fit_rician_mixture(Volume(x[4:]))
    b = fit_rician_mixture(Volume(poisoned, mask=mask))
    assert a.air.sigma == pytest.approx(b.air.sigma, rel=1e-6)


def test_errors():
    with pytest.raises(FitError, match="zero spread"):
        fit_rician_mixture(np.full((16, 16, 16), 3.0))
    with pytest.raises(FitError, match="1000"):
        fit_rician_mixture(np.ones((5, 5, 5)))
    with pytest.raises(FitError, match="negative"):
        fit_rician_mixture(rician_image(0, 5.0) - 50.0)
    with pytest.raises(ValueError):
        fit_rician_mixture(rician_image(0, 5.0), bins=10)


def test_lambda_heuristic_values():
    assert lambda_heuristic(math.sqrt(2) / K_LAMBDA) == pytest.approx(1.0)
    assert lambda_heuristic(100.0) == pytest.approx(math.sqrt(2) / 467, rel=1e-12)
    assert lambda_heuristic(100.0) == pytest.approx(3.028e-3, rel=1e-3)
    assert lambda_heuristic(1.0) == pytest.approx(0.3028, rel=1e-3)
    with pytest.raises(ValueError):
        lambda_heuristic(0.0)


def test_precision_definition():
    from mtvsr.estimation import RicianComponent, RicianMixtureFit

    for s, tau in ((5.0, 0.04), (1.0, 1.0)):
        fit = RicianMixtureFit([RicianComponent(0, s, 0.5), RicianComponent(9, 1, 0.5)], 0, 0.0)
        assert noise_precision(fit) == pytest.approx(tau)
