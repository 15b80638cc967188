import csv
import json
import math

import numpy as np
import pytest

import corrwishart.ensemble as ensemble
from corrwishart.ensemble import EigenFailure, EmpiricalSpectrum, EnsembleConfig, SpectrumSpec
from corrwishart.harness import (
    ECDF,
    ExperimentAborted,
    ExperimentConfig,
    batched_extremes,
    batched_wishart,
    ecdf,
    fit_bounds,
    fit_location_scale,
    ks_distance,
    pdf_histogram,
    run_experiment,
    select_f4_convention,
    simulate_extremes,
    summary_dict,
    write_outputs,
)
from corrwishart.oracle import GapQuery, gap_exact_beta2, positive_definite_indicator
from corrwishart.scaling import DegenerateEdge, johnstone_params
from corrwishart.tracywidom import F4_CONVENTIONS, tracy_widom


def _f2_samples(n, seed=0):
    return tracy_widom(2).quantile(np.random.default_rng(seed).random(n))


def _experiment(beta=2, p=6, n=18, trials=200, spectrum=None, seed=11, **kw):
    ens = EnsembleConfig(beta=beta, p=p, n=n, spectrum=spectrum or SpectrumSpec(), seed=seed)
    return ExperimentConfig(ensemble=ens, trials=trials, **kw)


# --- ECDF and KS -------------------------------------------------------------


def test_ecdf_single_point():
    e = ecdf([1.0])
    assert e(0.999) == 0.0 and e(1.0) == 1.0 and e(5.0) == 1.0
    assert e.left_limit(1.0) == 0.0


def test_ecdf_three_points():
    e = ECDF([3.0, 1.0, 2.0])
    assert e(2.0) == pytest.approx(2 / 3)
    assert e.left_limit(2.0) == pytest.approx(1 / 3)
    x = np.linspace(0, 4, 50)
    assert np.all(np.diff(e(x)) >= 0)
    assert e(-1e9) == 0.0 and e(1e9) == 1.0
    with pytest.raises(ValueError):
        ECDF([])


def test_ks_constant_sample():
    tw = tracy_widom(2)
    assert ks_distance(ecdf([0.0]), tw) == pytest.approx(float(tw.cdf(0.0)), abs=1e-12)
    assert ks_distance(ecdf([0.0]), tw) == pytest.approx(0.969, abs=1e-3)


def test_ks_shift_sensitivity():
    tw = tracy_widom(2)
    x = _f2_samples(50_000, seed=1)
    grid = np.linspace(-8, 6, 5001)
    expected = np.max(np.abs(tw.cdf(grid) - tw.cdf(grid - 0.5)))
    ks = ks_distance(ecdf(x + 0.5), tw)
    assert ks > 0.1
    assert ks == pytest.approx(expected, abs=0.02)


def test_ks_sampling_bound():
    tw = tracy_widom(2)
    N = 10_000
    values = [ks_distance(ecdf(_f2_samples(N, seed=s)), tw) for s in range(20)]
    assert sum(v <= 1.63 / math.sqrt(N) for v in values) >= 18
    assert ks_distance(ecdf(_f2_samples(400_000, seed=3)), tw) < 1.63 / math.sqrt(400_000)


def test_ks_accepts_plain_callables():
    x = np.random.default_rng(0).random(1000)
    assert ks_distance(ecdf(x), lambda q: np.clip(q, 0, 1)) < 0.06


# --- location/scale fit ------------------------------------------------------


def test_fit_on_exact_samples_is_identity():
    fit = fit_location_scale(_f2_samples(20_000, seed=4), tracy_widom(2), (1.0, (0.8, 1.2)))
    assert abs(fit.delta) <= 0.05
    # one kappa grid step is 0.01; allow two for sampling scatter
    assert fit.kappa == pytest.approx(1.0, abs=0.02)
    assert not fit.at_boundary


@pytest.mark.parametrize("delta0,kappa0", [(0.2, 1.1), (-0.1, 0.9), (0.3, 1.0)])
def test_fit_recovers_known_adjustment(delta0, kappa0):
    x = kappa0 * _f2_samples(40_000, seed=5) + delta0
    bounds = (1.0, (0.8, 1.2))
    fit = fit_location_scale(x, tracy_widom(2), bounds)
    step_d, step_k = 2 * bounds[0] / 40, 0.4 / 40
    assert abs(fit.delta - delta0) <= step_d
    # the KS-optimal scale scatters by about a grid step at this sample size
    assert abs(fit.kappa - kappa0) <= 2 * step_k
    assert fit.ks <= ks_distance(ecdf(x), tracy_widom(2))
    assert not fit.at_boundary


def test_fit_flags_boundary():
    x = _f2_samples(20_000, seed=6) + 1.5
    fit = fit_location_scale(x, tracy_widom(2), (0.8, (0.8, 1.2)))
    assert fit.at_boundary
    assert abs(fit.delta) <= 0.8 + 1e-12


def test_location_only_fit():
    x = _f2_samples(20_000, seed=7) - 0.25
    fit = fit_location_scale(x, tracy_widom(2), (1.0, (1.0, 1.0)))
    assert fit.kappa == 1.0
    assert fit.delta == pytest.approx(-0.25, abs=0.05)


def test_fit_preconditions():
    with pytest.raises(ValueError):
        fit_location_scale(np.zeros(999), tracy_widom(2), (1.0, (0.8, 1.2)))
    with pytest.raises(ValueError):
        fit_location_scale(_f2_samples(2000), tracy_widom(2), (1.0, (1.1, 1.2)))


def test_fit_bounds_are_order_one_over_n():
    par = johnstone_params(300, 100, "max", "adjusted")
    d_chi, (k_lo, k_hi) = fit_bounds(par)
    assert d_chi * par.sigma == pytest.approx(5 * par.mu / par.n, rel=1e-12)
    assert k_hi - 1 == pytest.approx(5 * par.n ** (-1 / 3), rel=1e-12)
    assert 1 - k_lo == pytest.approx(5 * par.n ** (-1 / 3), rel=1e-12)


# --- histograms --------------------------------------------------------------


def test_histogram_of_uniform_samples():
    N, bins = 100_000, 10
    h = pdf_histogram(np.random.default_rng(8).random(N), bins, range=(0.0, 1.0))
    # count per bin ~ Binomial(N, 1/10): density sd = sqrt(p(1-p)/N) / width
    sd = math.sqrt(0.1 * 0.9 / N) / 0.1
    assert np.all(np.abs(h.density - 1.0) <= 3 * sd)


def test_histogram_matches_f2_density():
    tw = tracy_widom(2)
    h = pdf_histogram(_f2_samples(80_000, seed=9), 60, range=(-5.0, 2.0))
    assert np.max(np.abs(h.density - tw.pdf(h.centers))) <= 0.03


def test_histogram_area_and_bins():
    h = pdf_histogram(np.random.default_rng(1).standard_normal(1234), 37)
    assert np.sum(h.density * h.widths) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        pdf_histogram([1.0, 2.0], 9)


# --- experiments -------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        _experiment(trials=99)
    with pytest.raises(ValueError):
        _experiment(histogram_bins=5)
    with pytest.raises(ValueError):
        _experiment(edges=())
    with pytest.raises(ValueError):
        _experiment(scaling_mode="fitted", trials=500)
    with pytest.raises(ValueError):
        _experiment(f4_convention="other")
    cfg = _experiment(trials=2000)
    assert (cfg.mode_for("max"), cfg.mode_for("min")) == ("adjusted", "fitted")
    assert _experiment(trials=200).mode_for("min") == "adjusted"
    assert _experiment(scaling_mode="paper").mode_for("min") == "paper"


def test_thread_count_does_not_change_results():
    spec = SpectrumSpec("uniform", mean=1.0, var_exponent=1.5)
    one = run_experiment(_experiment(trials=100, spectrum=spec, threads=1))
    many = run_experiment(_experiment(trials=100, spectrum=spec, threads=8))
    assert np.array_equal(one.x_max, many.x_max)
    assert np.array_equal(one.x_min, many.x_min)
    for edge in ("max", "min"):
        assert np.array_equal(one.edges[edge].chi, many.edges[edge].chi)
    assert summary_dict(one) == summary_dict(many)


def test_seed_changes_results():
    a = run_experiment(_experiment(trials=100, seed=1))
    b = run_experiment(_experiment(trials=100, seed=2))
    assert not np.array_equal(a.x_max, b.x_max)


def test_failed_trials_are_resampled(monkeypatch):
    # one failure in 1000 trials is at the 0.1% abort limit
    cfg = _experiment(trials=1000)
    spectrum = EmpiricalSpectrum.from_values(np.ones(6))
    clean = simulate_extremes(cfg.ensemble, spectrum, cfg.trials)
    real = ensemble.extreme_eigenvalues
    seen = set()

    def flaky(W, trial=None):
        if trial == 70 and trial not in seen:
            seen.add(trial)
            raise EigenFailure("synthetic failure", trial)
        return real(W, trial)

    monkeypatch.setattr(ensemble, "extreme_eigenvalues", flaky)
    x_max, x_min, resampled = simulate_extremes(cfg.ensemble, spectrum, cfg.trials, threads=3)
    assert resampled == [(70, 1)]
    keep = np.arange(cfg.trials) != 70
    assert np.array_equal(x_max[keep], clean[0][keep])
    assert x_max[70] != clean[0][70]


def test_too_many_failures_abort(monkeypatch):
    real = ensemble.extreme_eigenvalues
    seen = set()

    def flaky(W, trial=None):
        if trial in (3, 4) and trial not in seen:
            seen.add(trial)
            raise EigenFailure("synthetic failure", trial)
        return real(W, trial)

    monkeypatch.setattr(ensemble, "extreme_eigenvalues", flaky)
    cfg = _experiment(trials=1000)
    with pytest.raises(ExperimentAborted, match=r"\[3, 4\]"):
        simulate_extremes(cfg.ensemble, EmpiricalSpectrum.from_values(np.ones(6)), 1000)


def test_persistent_failure_reports_trial(monkeypatch):
    def broken(W, trial=None):
        raise EigenFailure("synthetic failure", trial)

    monkeypatch.setattr(ensemble, "extreme_eigenvalues", broken)
    cfg = _experiment(trials=100)
    with pytest.raises(EigenFailure) as info:
        simulate_extremes(cfg.ensemble, EmpiricalSpectrum.from_values(np.ones(6)), 100)
    assert info.value.trial == 0


@pytest.mark.parametrize("c", [0.37, 4.0])
def test_scale_equivariance(c):
    lams = (0.8, 0.9, 1.0, 1.1, 1.2, 1.3)
    base = run_experiment(_experiment(trials=150, spectrum=SpectrumSpec("explicit", values=lams)))
    scaled = run_experiment(
        _experiment(trials=150, spectrum=SpectrumSpec("explicit", values=tuple(c * v for v in lams)))
    )
    assert np.allclose(scaled.x_max, c * base.x_max, rtol=1e-12, atol=0)
    for edge in ("max", "min"):
        assert np.max(np.abs(scaled.edges[edge].chi - base.edges[edge].chi)) <= 1e-10


def test_degenerate_edge_is_propagated():
    with pytest.raises(DegenerateEdge):
        run_experiment(_experiment(beta=1, p=8, n=8, edges=("min",)))
    # the largest eigenvalue of a square matrix is fine
    res = run_experiment(_experiment(beta=1, p=8, n=8, edges=("max",)))
    assert set(res.edges) == {"max"}


@pytest.mark.slow
def test_mean_decreases_with_beta():
    means = []
    for beta in (1, 2, 4):
        res = run_experiment(_experiment(beta=beta, p=10, n=30, trials=20_000, edges=("max",), scaling_mode="paper"))
        means.append(float(np.mean(res.edges["max"].chi)))
    assert means[0] > means[1] > means[2]


def test_gap_probability_derivative_is_the_density():
    # E(t) = < Theta(t - W W^+) >; its finite differences on the bin edges are
    # the x_max histogram, and both follow the exact density
    p, n, trials = 4, 8, 100_000
    lams = (1.0, 1.0, 1.0, 1.0)
    cfg = EnsembleConfig(beta=2, p=p, n=n, spectrum=SpectrumSpec("explicit", values=lams), seed=5)
    spec = EmpiricalSpectrum.from_values(lams)
    edges = np.linspace(10.0, 40.0, 31)
    counts = np.zeros(edges.size)
    for C in batched_wishart(cfg, spec, trials):
        eye = np.eye(p)
        for i, t in enumerate(edges):
            counts[i] += np.sum(positive_definite_indicator(t * eye - C))
    E_hat = counts / trials
    dE = np.diff(E_hat) / np.diff(edges)
    x_max, _ = batched_extremes(cfg, spec, trials)
    inside = (x_max >= edges[0]) & (x_max < edges[-1])
    h = pdf_histogram(x_max[inside], 30, range=(edges[0], edges[-1]))
    density = h.density * inside.mean()
    assert np.allclose(dE, density, atol=1e-12)
    # against the exact derivative of the gap probability
    exact = np.array([gap_exact_beta2(GapQuery("max_below_t", t, spec, n)) for t in edges])
    dE_exact = np.diff(exact) / np.diff(edges)
    se = np.sqrt(np.maximum(dE_exact * np.diff(edges), 1.0 / trials) / trials) / np.diff(edges)
    assert np.all(np.abs(dE - dE_exact) <= 4 * se)


def test_fitted_and_centered_modes():
    spec = SpectrumSpec("uniform", mean=1.0, var_exponent=1.75)
    res = run_experiment(_experiment(p=20, n=60, trials=2000, spectrum=spec, scaling_mode="centered"))
    for edge in ("max", "min"):
        e = res.edges[edge]
        assert e.mode == "centered"
        assert e.ks == e.ks_by_mode["centered"]
        assert e.ks_by_mode["centered"] <= e.ks_by_mode["adjusted"] + 1e-12
        assert e.ks_by_mode["fitted"] <= e.ks_by_mode["centered"] + 1e-3
        assert abs(e.centered_delta) <= e.delta_bound + 1e-9
        assert abs(e.delta) <= e.delta_bound + 1e-9
        lo, hi = e.kappa_bounds
        assert lo <= e.kappa <= hi


def test_auto_mode_without_enough_trials_reports_no_fit():
    res = run_experiment(_experiment(trials=300))
    e = res.edges["min"]
    assert e.mode == "adjusted"
    assert math.isnan(e.ks_by_mode["fitted"])
    s = summary_dict(res)
    assert s["edges"]["min"]["ks_fitted"] is None
    json.dumps(s, allow_nan=False)


def test_beta4_convention_comparison():
    res = run_experiment(_experiment(beta=4, p=8, n=24, trials=400))
    assert res.f4_convention == "ensemble"
    assert set(res.f4_ks) == {"max", "min"}
    for v in res.f4_ks.values():
        assert set(v) == set(F4_CONVENTIONS)
    chosen = select_f4_convention(res)
    totals = {c: sum(v[c] for v in res.f4_ks.values()) for c in F4_CONVENTIONS}
    assert totals[chosen] == min(totals.values())
    with pytest.raises(ValueError):
        select_f4_convention(run_experiment(_experiment(trials=100)))


def test_write_outputs(tmp_path):
    res = run_experiment(_experiment(p=10, n=30, trials=120, spectrum=SpectrumSpec("uniform", var_exponent=1.75)))
    summary = write_outputs(res, str(tmp_path))
    with open(tmp_path / "samples.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["trial", "x_max", "x_min", "chi_max", "chi_min"]
    assert len(rows) == 121
    assert float(rows[5][1]) == pytest.approx(res.x_max[4], rel=1e-9)
    for edge in ("max", "min"):
        with open(tmp_path / f"hist_{edge}.csv") as fh:
            hist = list(csv.reader(fh))
        assert hist[0] == ["bin_center", "density", "tw_pdf"]
        assert len(hist) == 1 + res.config.histogram_bins
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    assert on_disk == json.loads(json.dumps(summary))
    assert on_disk["gamma_squared"] == pytest.approx(1 / 3)
    assert on_disk["edges"]["max"]["params_paper"]["mu"] == pytest.approx(johnstone_params(30, 10).mu)
    assert on_disk["condition"]["passed"] is True
    assert on_disk["seed"] == 11
