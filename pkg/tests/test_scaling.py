import math

import numpy as np
import pytest

from corrwishart.ensemble import EmpiricalSpectrum, SpectrumSpec, build_spectrum, substream
from corrwishart.oracle import GapQuery, gap_exact_beta2
from corrwishart.scaling import (
    DegenerateEdge,
    center_rescale,
    central_derivative,
    first_order_correction,
    johnstone_params,
    uncenter,
    variance_condition,
)


def test_params_max_edge_example():
    par = johnstone_params(300, 100, "max", "paper")
    assert par.gamma == pytest.approx(0.57735, abs=1e-5)
    assert par.mu == pytest.approx(746.41, abs=0.01)
    assert par.sigma == pytest.approx(14.76, abs=0.01)
    assert par.nu == 200


def test_params_min_edge_example():
    par = johnstone_params(300, 100, "min", "paper")
    assert par.mu == pytest.approx(53.59, abs=0.01)
    assert par.sigma == pytest.approx(-(1 - 3**-0.5) ** (4 / 3) * 3 ** (1 / 6) * 300 ** (1 / 3), rel=1e-14)
    # the rounded figure -2.546 is 0.15% off the formula value -2.54997
    assert par.sigma == pytest.approx(-2.546, rel=2e-3)


@pytest.mark.parametrize("n,p", [(300, 100), (150, 50), (10, 3), (9, 8)])
@pytest.mark.parametrize("mode", ["paper", "adjusted"])
def test_params_invariants(n, p, mode):
    hi = johnstone_params(n, p, "max", mode)
    lo = johnstone_params(n, p, "min", mode)
    assert hi.sigma > 0 > lo.sigma
    assert lo.mu < hi.mu
    assert hi.nu == round((1 - (p / n)) * n)


def test_adjusted_mode_substitutes_half_integers():
    adj = johnstone_params(300, 100, "max", "adjusted")
    g = math.sqrt(99.5 / 299.5)
    assert adj.gamma == pytest.approx(g, rel=1e-14)
    assert adj.mu == pytest.approx((1 + g) ** 2 * 299.5, rel=1e-14)
    assert adj.sigma == pytest.approx((1 + g) ** (4 / 3) * g ** (-1 / 3) * 299.5 ** (1 / 3), rel=1e-14)


def test_degenerate_hard_edge():
    with pytest.raises(DegenerateEdge):
        johnstone_params(8, 8, "min", "paper")
    # the largest eigenvalue is fine at p = n
    assert johnstone_params(8, 8, "max").mu == pytest.approx(32.0)


def test_rejects_p_above_n():
    with pytest.raises(ValueError):
        johnstone_params(5, 6)


def test_center_rescale_examples():
    par = johnstone_params(300, 100, "max")
    assert center_rescale(par.mu, par) == pytest.approx(0.0, abs=1e-12)
    # the rounded constants give chi ~ 1
    assert (761.17 - 746.41) / 14.76 == pytest.approx(1.0, abs=1e-9)
    assert center_rescale(par.mu + par.sigma, par) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("edge", ["max", "min"])
def test_center_rescale_roundtrip_and_monotone(edge):
    par = johnstone_params(300, 100, edge)
    x = np.linspace(20.0, 900.0, 97)
    for bar in (0.5, 1.0, 3.0):
        chi = center_rescale(x, par, bar)
        assert np.allclose(uncenter(chi, par, bar), x, rtol=1e-12, atol=0)
        assert np.all(np.sign(np.diff(chi)) == np.sign(par.sigma))


def test_condition_identity_passes():
    rep = variance_condition(EmpiricalSpectrum.from_values(np.ones(100)), 300)
    assert rep.passed and rep.var_s == 0.0 and math.isinf(rep.alpha_eff)
    assert rep.to_dict()["alpha_eff"] == "inf"


def test_condition_uniform_spectrum_of_the_simulations():
    spec = build_spectrum(SpectrumSpec("uniform", var_exponent=1.75), 100, substream(20140101, 0))
    rep = variance_condition(spec, 300)
    assert rep.passed
    assert rep.alpha_eff == pytest.approx(1.75, abs=0.01)
    # n^(2/3) p^(-7/4) = 0.01417; the quoted figure for the simulated
    # ensemble is the rounder 0.013
    assert 300 ** (2 / 3) * 100 ** (-1.75) == pytest.approx(0.014170, abs=1e-5)
    assert rep.diagnostic == pytest.approx(0.013, abs=1.5e-3)
    expected = rep.alpha_eff
    g = math.sqrt(1 / 3)
    factor = g ** (2 * expected - 1) * (1 + g) ** (2 / 3) * 300 ** (2 / 3 - expected)
    assert rep.decay_factor == pytest.approx(factor, rel=1e-12)


def test_condition_fails_below_two_thirds():
    p = 64
    a = math.sqrt(3 * p**-0.5)
    lam = 1 + a * np.linspace(-1, 1, p)
    lam = 1 + (lam - 1) * math.sqrt(p**-0.5 / np.var(lam))
    rep = variance_condition(EmpiricalSpectrum.from_values(lam), 200)
    assert rep.alpha_eff == pytest.approx(0.5, abs=1e-10)
    assert not rep.passed


def test_central_derivative():
    assert central_derivative(math.exp, 1.0) == pytest.approx(math.e, rel=1e-9)


def _E0(p, n):
    ident = EmpiricalSpectrum.from_values(np.ones(p))
    return lambda t: gap_exact_beta2(GapQuery("max_below_t", t, ident, n), dps=60)


def test_first_order_correction_vanishes_for_centred_spectrum():
    spec = EmpiricalSpectrum.from_values([0.9, 1.0, 1.1, 1.0])
    E0 = _E0(4, 8)
    for t in (10.0, 20.0, 30.0):
        assert first_order_correction(E0, spec, t) == E0(t)
        assert first_order_correction(E0, spec, t, reference=spec.lambda_bar) == pytest.approx(E0(t), abs=1e-12)


def test_first_order_correction_tracks_oracle_p4():
    p, n, alpha = 4, 8, 1.75
    lam = 1 + p**-alpha * np.array([0.5, 1.0, 1.5, 2.0])
    spec = EmpiricalSpectrum.from_values(lam, alpha)
    E0 = _E0(p, n)
    par = johnstone_params(n, p, "max")
    for chi in (-1.5, -0.5, 0.5):
        t = float(uncenter(chi, par))
        exact = gap_exact_beta2(GapQuery("max_below_t", t, spec, n), dps=60)
        approx = first_order_correction(E0, spec, t, reference=1.0)
        # second-order remainder: (p^-alpha <L1>)^2 t^2 E0'' is O(p^(-2 alpha)) up to (mu/sigma)^2
        assert abs(exact - approx) <= 0.035
        # and the first-order term captures most of the deviation
        assert abs(exact - approx) < 0.5 * abs(exact - E0(t))


def test_first_order_correction_magnitude_scaling():
    # at fixed chi, t d/dt ~ mu/sigma ~ p^(2/3); the correction scales like p^(2/3 - alpha)
    alpha = 1.75
    sizes = (4, 8, 16)
    mags = []
    for p in sizes:
        n = 2 * p
        lam = 1 + p**-alpha * np.linspace(0.5, 2.0, p)
        spec = EmpiricalSpectrum.from_values(lam, alpha)
        E0 = _E0(p, n) if p < 16 else (
            lambda t, n=n, p=p: gap_exact_beta2(
                GapQuery("max_below_t", t, EmpiricalSpectrum.from_values(np.ones(p)), n), dps=120
            )
        )
        t = float(uncenter(-0.5, johnstone_params(n, p, "max")))
        mags.append(abs(first_order_correction(E0, spec, t, reference=1.0) - E0(t)))
    slope = np.polyfit(np.log(sizes), np.log(mags), 1)[0]
    assert slope == pytest.approx(2 / 3 - alpha, abs=0.1)


def test_expansion_consistency_mean_centred():
    # E_corr -> E_uncorr(bar) on the chi grid as p grows
    alpha = 1.75
    devs = []
    for p in (2, 4, 8):
        n = 2 * p
        l1 = np.linspace(0.5, 2.0, p)
        spec = EmpiricalSpectrum.from_values(1 + p**-alpha * (l1 - l1.mean()), alpha)
        E0 = _E0(p, n)
        par = johnstone_params(n, p, "max")
        dev = 0.0
        for chi in (-1.5, -0.5, 0.5):
            t = float(uncenter(chi, par))
            dev = max(dev, abs(gap_exact_beta2(GapQuery("max_below_t", t, spec, n), dps=60) - E0(t)))
        devs.append(dev)
    assert devs[0] > devs[1] > devs[2]
    assert devs[2] < 1e-3
