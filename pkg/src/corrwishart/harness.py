"""Monte Carlo experiments on the extreme eigenvalues.

Every trial draws from its own counter-based substream keyed by
``(seed, trial, attempt)``.  Trials are processed in fixed-size blocks on a
thread pool and reassembled in trial order, so results do not depend on the
number of threads.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.optimize import minimize_scalar

from . import ensemble
from .ensemble import (
    BLOCK_STREAM,
    SPECTRUM_STREAM,
    TRIAL_STREAM,
    EigenFailure,
    EmpiricalSpectrum,
    EnsembleConfig,
    build_spectrum,
    sample_batch,
    sample_data_matrix,
    substream,
    wishart_matrix,
)
from .scaling import (
    ConditionReport,
    ScalingParams,
    center_rescale,
    johnstone_params,
    variance_condition,
)
from .tracywidom import DEFAULT_F4_CONVENTION, F4_CONVENTIONS, TWDistribution, tracy_widom

log = logging.getLogger(__name__)

SCALING_MODES = ("auto", "paper", "adjusted", "centered", "fitted")
FIT_MODES = ("centered", "fitted")
FIT_BOUND_CONST = 5.0
MAX_FAILURE_FRACTION = 1e-3
MAX_ATTEMPTS = 5
BLOCK_SIZE = 64
MIN_FIT_SAMPLES = 1000


class ExperimentAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    ensemble: EnsembleConfig
    trials: int
    edges: tuple[str, ...] = ("max", "min")
    scaling_mode: str = "auto"
    histogram_bins: int = 60
    threads: int = 1
    f4_convention: str | None = None

    def __post_init__(self):
        if self.trials < 100:
            raise ValueError("need at least 100 trials")
        if self.histogram_bins < 10:
            raise ValueError("need at least 10 histogram bins")
        if self.scaling_mode not in SCALING_MODES:
            raise ValueError(f"scaling_mode must be one of {SCALING_MODES}")
        if not self.edges or any(e not in ("max", "min") for e in self.edges):
            raise ValueError("edges must be a nonempty subset of {max, min}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.f4_convention is not None and self.f4_convention not in F4_CONVENTIONS:
            raise ValueError(f"f4_convention must be one of {F4_CONVENTIONS}")
        if self.scaling_mode in FIT_MODES and self.trials < MIN_FIT_SAMPLES:
            raise ValueError(f"{self.scaling_mode} scaling needs at least {MIN_FIT_SAMPLES} trials")

    def mode_for(self, edge: str) -> str:
        """Scaling mode used for ``edge``.

        ``auto`` picks ``adjusted`` at the largest eigenvalue and ``fitted`` at
        the smallest, whose hard-edge corrections are larger; with fewer than
        1000 trials there is too little data to fit, and ``adjusted`` is used.
        """
        if self.scaling_mode != "auto":
            return self.scaling_mode
        if edge == "min" and self.trials >= MIN_FIT_SAMPLES:
            return "fitted"
        return "adjusted"


class ECDF:
    """Right-continuous empirical distribution function."""

    def __init__(self, samples):
        x = np.sort(np.asarray(samples, dtype=float).ravel())
        if x.size == 0:
            raise ValueError("ECDF needs at least one sample")
        self.x = x
        self.n = x.size

    def __call__(self, q):
        out = np.searchsorted(self.x, q, side="right") / self.n
        return float(out) if np.ndim(out) == 0 else out

    def left_limit(self, q):
        out = np.searchsorted(self.x, q, side="left") / self.n
        return float(out) if np.ndim(out) == 0 else out


def ecdf(samples) -> ECDF:
    return ECDF(samples)


def _as_cdf(F) -> Callable:
    if isinstance(F, TWDistribution):
        return F.cdf
    return F


def ks_distance(e: ECDF, F) -> float:
    """sup over sample points of max(|F - e(x-)|, |F - e(x)|)."""
    cdf = _as_cdf(F)
    pts = np.unique(e.x)
    f = np.asarray(cdf(pts), dtype=float)
    upper = e(pts)
    lower = e.left_limit(pts)
    return float(max(np.max(np.abs(f - lower)), np.max(np.abs(f - upper))))


def _ks_sorted(x_sorted: np.ndarray, cdf) -> float:
    # continuous samples: no ties, so e(x_i-) = (i-1)/N and e(x_i) = i/N
    n = x_sorted.size
    f = cdf(x_sorted)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


@dataclass(frozen=True)
class FitResult:
    delta: float
    kappa: float
    ks: float
    at_boundary: bool


def fit_location_scale(
    samples,
    F,
    bounds: tuple[float, tuple[float, float]],
    grid: int = 41,
    rounds: int = 12,
) -> FitResult:
    """Fit ``chi -> (chi - delta) / kappa`` to minimise the KS distance to F.

    Coordinate search on a ``grid x grid`` lattice inside
    ``|delta| <= bounds[0]``, ``kappa in bounds[1]``, then golden-section
    refinement of each coordinate inside its bracketing grid cell.
    ``at_boundary`` flags an optimum within one grid step of a bound.  A
    degenerate range ``kappa in (1, 1)`` fits the location only.

    The search runs in coordinates where the scale acts about the median
    ``c`` of F, ``chi -> (chi - c - d) / kappa + c``, which decouples the two
    parameters; ``delta = d + c (1 - kappa)``.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    if x.size < MIN_FIT_SAMPLES:
        raise ValueError(f"fit_location_scale needs at least {MIN_FIT_SAMPLES} samples")
    cdf = _as_cdf(F)
    d_max, (k_lo, k_hi) = bounds
    if d_max < 0 or not 0 < k_lo <= 1 <= k_hi:
        raise ValueError("bounds must contain (delta, kappa) = (0, 1)")
    if isinstance(F, TWDistribution):
        c = F.quantile(0.5)
    else:
        c = float(np.median(x))
    d_grid = np.linspace(-d_max, d_max, grid)
    k_grid = np.linspace(k_lo, k_hi, grid)
    step_d = d_grid[1] - d_grid[0] if grid > 1 and d_max > 0 else 0.0
    step_k = k_grid[1] - k_grid[0] if grid > 1 else 0.0

    def ks(d, k):
        delta = d + c * (1.0 - k)
        if abs(delta) > d_max + 1e-12:
            return np.inf
        return _ks_sorted((x - delta) / k, cdf)

    d, k = 0.0, 1.0
    best = ks(d, k)
    for _ in range(rounds):
        vals = [ks(dd, k) for dd in d_grid]
        i_d = int(np.argmin(vals))
        if vals[i_d] < best:
            d, best = float(d_grid[i_d]), vals[i_d]
        vals = [ks(d, kk) for kk in k_grid]
        i_k = int(np.argmin(vals))
        if vals[i_k] < best:
            k, best = float(k_grid[i_k]), vals[i_k]
        else:
            break

    def refine(value, step, lo, hi, f):
        a, b, cc = max(value - step, lo), value, min(value + step, hi)
        fb = f(b)
        if not (a < b < cc) or not (fb <= f(a) and fb <= f(cc)):
            return b
        res = minimize_scalar(f, bracket=(a, b, cc), method="golden", options={"xtol": 1e-4})
        return float(res.x) if a <= res.x <= cc and res.fun <= fb else b

    if step_d > 0:
        d = refine(d, step_d, -d_max, d_max, lambda dd: ks(dd, k))
    k = refine(k, step_k, k_lo, k_hi, lambda kk: ks(d, kk))
    delta = d + c * (1.0 - k)
    at_boundary = bool(
        (d_max > 0 and abs(delta) >= d_max - step_d)
        or (k_hi > k_lo and (k <= k_lo + step_k or k >= k_hi - step_k))
    )
    return FitResult(delta=delta, kappa=k, ks=ks(d, k), at_boundary=at_boundary)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    density: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def pdf_histogram(samples, bins: int, range: tuple[float, float] | None = None) -> Histogram:
    """Area-normalised histogram of the samples."""
    if bins < 10:
        raise ValueError("need at least 10 bins")
    density, edges = np.histogram(np.asarray(samples, dtype=float), bins=bins, range=range, density=True)
    return Histogram(edges=edges, density=density)


def _trial_extremes(cfg: EnsembleConfig, spectrum: EmpiricalSpectrum, trial: int):
    """Extremes of one trial, resampling failures on fresh substreams."""
    for attempt in range(MAX_ATTEMPTS):
        rng = substream(cfg.seed, TRIAL_STREAM, trial, attempt)
        W = sample_data_matrix(cfg, spectrum, rng)
        try:
            x_max, x_min = ensemble.extreme_eigenvalues(W, trial)
            return x_max, x_min, attempt
        except EigenFailure as exc:
            log.warning("resampling after failure: %s", exc)
    raise EigenFailure(f"{MAX_ATTEMPTS} consecutive failures", trial)


def simulate_extremes(
    cfg: EnsembleConfig,
    spectrum: EmpiricalSpectrum,
    trials: int,
    threads: int = 1,
    block_size: int = BLOCK_SIZE,
):
    """Per-trial (x_max, x_min) arrays plus the list of resampled trials."""
    x_max = np.empty(trials)
    x_min = np.empty(trials)
    attempts = np.zeros(trials, dtype=int)

    def run_block(start):
        stop = min(start + block_size, trials)
        return start, [_trial_extremes(cfg, spectrum, t) for t in range(start, stop)]

    starts = range(0, trials, block_size)
    if threads == 1:
        results: Iterator = map(run_block, starts)
        pool = None
    else:
        pool = ThreadPoolExecutor(max_workers=threads)
        results = pool.map(run_block, starts)
    try:
        for start, rows in results:
            for i, (hi, lo, att) in enumerate(rows):
                x_max[start + i], x_min[start + i] = hi, lo
                attempts[start + i] = att
    finally:
        if pool is not None:
            pool.shutdown()
    failed = np.flatnonzero(attempts)
    if failed.size > MAX_FAILURE_FRACTION * trials:
        raise ExperimentAborted(
            f"{failed.size} of {trials} trials needed resampling (limit 0.1%); "
            f"first failures at trials {failed[:10].tolist()}"
        )
    resampled = [(int(t), int(attempts[t])) for t in failed]
    return x_max, x_min, resampled


def batched_extremes(
    cfg: EnsembleConfig, spectrum: EmpiricalSpectrum, trials: int, block: int = 20_000
):
    """Vectorised (x_max, x_min) for small matrices, one substream per block."""
    out_max, out_min = [], []
    for b, start in enumerate(range(0, trials, block)):
        size = min(block, trials - start)
        rng = substream(cfg.seed, BLOCK_STREAM, b)
        ev = ensemble.eigenvalues(sample_batch(cfg, spectrum, rng, size), cfg.beta)
        out_max.append(ev[:, -1])
        out_min.append(ev[:, 0])
    return np.concatenate(out_max), np.concatenate(out_min)


def batched_wishart(
    cfg: EnsembleConfig, spectrum: EmpiricalSpectrum, trials: int, block: int = 20_000
) -> Iterator[np.ndarray]:
    """Stacks of W W^+ drawn like :func:`batched_extremes`."""
    for b, start in enumerate(range(0, trials, block)):
        size = min(block, trials - start)
        rng = substream(cfg.seed, BLOCK_STREAM, b)
        yield wishart_matrix(sample_batch(cfg, spectrum, rng, size))


def fit_bounds(params: ScalingParams) -> tuple[float, tuple[float, float]]:
    """Limit-preserving bounds in chi units: |delta_x| <= 5 mu / n, |kappa - 1| <= 5 n^-1/3."""
    d_max_x = FIT_BOUND_CONST * params.mu / params.n
    k_half = FIT_BOUND_CONST / params.n ** (1.0 / 3.0)
    return d_max_x / abs(params.sigma), (max(1.0 - k_half, 0.05), 1.0 + k_half)


@dataclass(frozen=True)
class EdgeResult:
    """Rescaled samples of one edge and their comparison with F_beta.

    ``delta`` is in eigenvalue units, ``delta_chi`` in units of the adjusted
    chi; both belong to the location-scale fit.  ``centered_delta`` is the
    location-only fit (``kappa = 1``).
    """

    edge: str
    mode: str
    params_paper: ScalingParams
    params_adjusted: ScalingParams
    chi: np.ndarray
    ks: float
    ks_by_mode: dict
    delta: float
    kappa: float
    delta_chi: float
    delta_bound: float
    kappa_bounds: tuple[float, float]
    fit_at_boundary: bool
    centered_delta: float
    centered_at_boundary: bool
    histogram: Histogram

    @property
    def ecdf(self) -> ECDF:
        return ECDF(self.chi)

    @property
    def at_boundary(self) -> bool:
        """Boundary flag of the fit behind ``mode`` (False for unfitted modes)."""
        if self.mode == "fitted":
            return self.fit_at_boundary
        if self.mode == "centered":
            return self.centered_at_boundary
        return False


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    spectrum: EmpiricalSpectrum
    x_max: np.ndarray
    x_min: np.ndarray
    edges: dict
    condition: ConditionReport
    f4_convention: str | None
    f4_ks: dict = field(default_factory=dict)
    resampled: tuple = ()


_NO_FIT = FitResult(delta=0.0, kappa=1.0, ks=math.nan, at_boundary=False)


def _edge_analysis(edge, x, cfg: ExperimentConfig, lambda_bar, tw: TWDistribution):
    ens = cfg.ensemble
    paper = johnstone_params(ens.n, ens.p, edge, "paper")
    adjusted = johnstone_params(ens.n, ens.p, edge, "adjusted")
    chi_paper = center_rescale(x, paper, lambda_bar)
    chi_adj = center_rescale(x, adjusted, lambda_bar)
    d_bound, k_bounds = fit_bounds(adjusted)
    # both fits act on the adjusted chi, so they stay limit-preserving
    if x.size >= MIN_FIT_SAMPLES:
        fit = fit_location_scale(chi_adj, tw, (d_bound, k_bounds))
        loc = fit_location_scale(chi_adj, tw, (d_bound, (1.0, 1.0)))
    else:
        fit = loc = _NO_FIT
    chi_by_mode = {
        "paper": chi_paper,
        "adjusted": chi_adj,
        "centered": chi_adj - loc.delta,
        "fitted": (chi_adj - fit.delta) / fit.kappa,
    }
    ks_by_mode = {
        "paper": ks_distance(ECDF(chi_paper), tw),
        "adjusted": ks_distance(ECDF(chi_adj), tw),
        "centered": loc.ks,
        "fitted": fit.ks,
    }
    mode = cfg.mode_for(edge)
    chi = chi_by_mode[mode]
    hist = pdf_histogram(chi, cfg.histogram_bins)
    return EdgeResult(
        edge=edge,
        mode=mode,
        params_paper=paper,
        params_adjusted=adjusted,
        chi=chi,
        ks=ks_by_mode[mode],
        ks_by_mode=ks_by_mode,
        delta=fit.delta * adjusted.sigma,
        kappa=fit.kappa,
        delta_chi=fit.delta,
        delta_bound=d_bound * abs(adjusted.sigma),
        kappa_bounds=k_bounds,
        fit_at_boundary=fit.at_boundary,
        centered_delta=loc.delta * adjusted.sigma,
        centered_at_boundary=loc.at_boundary,
        histogram=hist,
    ), chi_paper


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    ens = cfg.ensemble
    # fail fast on degenerate edges before spending time sampling
    for edge in cfg.edges:
        johnstone_params(ens.n, ens.p, edge, "paper")
        johnstone_params(ens.n, ens.p, edge, "adjusted")
    spectrum = build_spectrum(ens.spectrum, ens.p, substream(ens.seed, SPECTRUM_STREAM))
    x_max, x_min, resampled = simulate_extremes(ens, spectrum, cfg.trials, cfg.threads)
    condition = variance_condition(spectrum, ens.n)

    convention = None
    f4_ks: dict = {}
    if ens.beta == 4:
        convention = cfg.f4_convention or DEFAULT_F4_CONVENTION
    tw = tracy_widom(ens.beta, convention or DEFAULT_F4_CONVENTION)

    edges = {}
    for edge in cfg.edges:
        x = x_max if edge == "max" else x_min
        edges[edge], chi_paper = _edge_analysis(edge, x, cfg, spectrum.lambda_bar, tw)
        if ens.beta == 4:
            # compare conventions on unfitted chi: a fitted scale would absorb
            # exactly the argument rescaling that distinguishes them
            e = ECDF(chi_paper)
            f4_ks[edge] = {conv: ks_distance(e, tracy_widom(4, conv)) for conv in F4_CONVENTIONS}
    return ExperimentResult(
        config=cfg,
        spectrum=spectrum,
        x_max=x_max,
        x_min=x_min,
        edges=edges,
        condition=condition,
        f4_convention=convention,
        f4_ks=f4_ks,
        resampled=tuple(resampled),
    )


def select_f4_convention(result: ExperimentResult) -> str:
    """Convention with the smallest paper-scaling KS summed over the edges."""
    if not result.f4_ks:
        raise ValueError("experiment has no beta = 4 KS comparison")
    totals = {c: sum(v[c] for v in result.f4_ks.values()) for c in F4_CONVENTIONS}
    return min(totals, key=totals.get)


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(x, ".10g")


def _json_float(x: float) -> float | None:
    return None if math.isnan(x) else x


def summary_dict(result: ExperimentResult) -> dict:
    cfg = result.config
    ens = cfg.ensemble
    edges = {}
    for name, e in result.edges.items():
        edges[name] = {
            "mode": e.mode,
            "ks": e.ks,
            "ks_paper": e.ks_by_mode["paper"],
            "ks_adjusted": e.ks_by_mode["adjusted"],
            "ks_centered": _json_float(e.ks_by_mode["centered"]),
            "ks_fitted": _json_float(e.ks_by_mode["fitted"]),
            "params_paper": e.params_paper.to_dict(),
            "params_adjusted": e.params_adjusted.to_dict(),
            "fitted_delta": e.delta,
            "fitted_delta_chi": e.delta_chi,
            "fitted_kappa": e.kappa,
            "delta_bound": e.delta_bound,
            "kappa_bounds": list(e.kappa_bounds),
            "fit_at_boundary": e.fit_at_boundary,
            "centered_delta": e.centered_delta,
            "centered_at_boundary": e.centered_at_boundary,
            "mean_chi": float(np.mean(e.chi)),
        }
    return {
        "beta": ens.beta,
        "p": ens.p,
        "n": ens.n,
        "trials": cfg.trials,
        "seed": ens.seed,
        "gamma": ens.gamma,
        "gamma_squared": ens.p / ens.n,
        "p_over_n": ens.p / ens.n,
        "spectrum": ens.spectrum.to_dict(),
        "lambda_bar": result.spectrum.lambda_bar,
        "var_s": result.spectrum.variance,
        "condition": result.condition.to_dict(),
        "edges": edges,
        "f4_convention": result.f4_convention,
        "f4_ks": result.f4_ks,
        "resampled_trials": [list(r) for r in result.resampled],
        "scaling_mode": cfg.scaling_mode,
        "histogram_bins": cfg.histogram_bins,
    }


def write_outputs(result: ExperimentResult, out_dir: str) -> dict:
    """samples.csv, summary.json and hist_<edge>.csv; returns the summary."""
    os.makedirs(out_dir, exist_ok=True)
    chi_max = result.edges["max"].chi if "max" in result.edges else None
    chi_min = result.edges["min"].chi if "min" in result.edges else None
    with open(os.path.join(out_dir, "samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "x_max", "x_min", "chi_max", "chi_min"])
        for t in range(result.x_max.size):
            w.writerow(
                [
                    t,
                    _fmt(result.x_max[t]),
                    _fmt(result.x_min[t]),
                    "" if chi_max is None else _fmt(chi_max[t]),
                    "" if chi_min is None else _fmt(chi_min[t]),
                ]
            )
    tw = tracy_widom(result.config.ensemble.beta, result.f4_convention or DEFAULT_F4_CONVENTION)
    for name, e in result.edges.items():
        with open(os.path.join(out_dir, f"hist_{name}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_center", "density", "tw_pdf"])
            for c, d in zip(e.histogram.centers, e.histogram.density):
                w.writerow([_fmt(c), _fmt(d), _fmt(float(tw.pdf(c)))])
    summary = summary_dict(result)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary
