"""Exact beta = 2 gap probabilities for correlated Wishart spectra.

Two independent routes:

* :func:`gap_exact_beta2` reduces the p-fold eigenvalue integral of the
  joint density (Vandermonde times ``det[exp(-x_j / Lambda_k)]`` times
  ``prod x^nu``) with the Andreief identity to a p x p determinant of
  incomplete gamma functions.  Equal population eigenvalues are handled by
  the confluent limit, in which the columns for a cluster of ``m`` equal
  values become ``x^r exp(-x / Lambda)``, ``r = 0..m-1``.

* :func:`gap_max_matrix_model_beta2` integrates the invariant n x n matrix
  model for P(x_max <= t) over the eigenvalues of the Fourier variable.
  Writing ``z = 1 + i y`` it reads

      int prod_i dz_i  Delta(z)^2 prod_i e^{z_i} z_i^{-n} prod_k (1 + z_i Lambda_k / t)^{-1}

  along Re z = 1.  Along that line the integrand decays only like a power
  (for p = 1, n = 2 it is not absolutely integrable), so every z_i is moved
  onto the parabola ``z = mu (1 + i u)^2`` which keeps all poles (0 and
  ``-t / Lambda_k``) on its left and makes the integrand decay like
  ``exp(-mu u^2)``.  The trapezoidal rule in ``u`` then converges
  geometrically.

Neither route computes the normalisation constant; both divide by their own
t -> infinity (or s -> 0) limit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import mpmath
import numpy as np
from scipy.special import gammainc, gammaincc, gammaln

from .ensemble import EmpiricalSpectrum

KINDS = ("max_below_t", "min_above_s")
COND_LIMIT = 1e12
DEGENERATE_RTOL = 1e-12


class IllConditioned(ValueError):
    """Population eigenvalues too close for the double-precision determinant."""


class QuadratureNotConverged(RuntimeError):
    def __init__(self, message: str, error_estimate: float):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3g})")
        self.error_estimate = error_estimate


@dataclass(frozen=True)
class GapQuery:
    kind: str
    threshold: float
    spectrum: EmpiricalSpectrum
    n: int
    beta: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.p > self.n:
            raise ValueError("need p <= n")

    @property
    def p(self) -> int:
        return self.spectrum.p

    @property
    def upsilon(self) -> float:
        """Exponent of det X in the joint density, beta(n - p + 1 - 2/beta)/2."""
        return self.beta * (self.n - self.p + 1 - 2 / self.beta) / 2

    def at(self, threshold: float) -> "GapQuery":
        return GapQuery(self.kind, threshold, self.spectrum, self.n, self.beta)


def _clusters(lambdas: np.ndarray) -> list[tuple[float, int]]:
    """(value, power r) per column; equal values get consecutive powers."""
    cols = []
    order = np.sort(lambdas)
    r = 0
    for k, lam in enumerate(order):
        if k > 0 and abs(lam - order[k - 1]) <= DEGENERATE_RTOL * lam:
            r += 1
            lam = cols[-1][0]
        else:
            r = 0
        cols.append((float(lam), r))
    return cols


def _exponents(q: GapQuery) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gamma shape a_{jk} and column scales for the determinant entries."""
    cols = _clusters(q.spectrum.lambdas)
    nu = q.n - q.p
    j = np.arange(1, q.p + 1)[:, None]
    lam = np.array([c[0] for c in cols])[None, :]
    r = np.array([c[1] for c in cols])[None, :]
    a = nu + j + r
    return a.astype(float), np.broadcast_to(lam, a.shape), r


def _check_beta(q: GapQuery) -> None:
    if q.beta != 2:
        raise ValueError("exact gap probabilities are only available for beta = 2")


def gap_exact_beta2(q: GapQuery, dps: int | None = None) -> float:
    """E_p([0,t]) or E_p([s,inf)) for beta = 2 by the Andreief determinant.

    ``dps`` switches to mpmath arithmetic with that many digits, which lifts
    the condition-number limit of the double-precision path.
    """
    _check_beta(q)
    if dps is not None:
        return _gap_exact_mp(q, dps)
    value, _ = gap_exact_beta2_with_error(q)
    return value


def gap_exact_beta2_with_error(q: GapQuery) -> tuple[float, float]:
    """Double-precision route; returns ``(probability, error estimate)``."""
    _check_beta(q)
    a, lam, _ = _exponents(q)
    # entries = lam^a Gamma(a) * P(a, t/lam); equilibrate with the t=inf part
    log_full = a * np.log(lam) + gammaln(a)
    row = np.max(log_full, axis=1, keepdims=True)
    col = np.max(log_full - row, axis=0, keepdims=True)
    full = np.exp(log_full - row - col)
    x = q.threshold / lam
    frac = gammainc(a, x) if q.kind == "max_below_t" else gammaincc(a, x)
    cond = np.linalg.cond(full)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditioned(
            f"determinant condition number {cond:.3g} exceeds {COND_LIMIT:.0e}; "
            "population eigenvalues are nearly degenerate. Perturb them apart, "
            "make them exactly equal (confluent limit), or pass dps= for "
            "multiprecision evaluation"
        )
    s_t, l_t = np.linalg.slogdet(full * frac)
    s_f, l_f = np.linalg.slogdet(full)
    value = float(s_t * s_f * math.exp(l_t - l_f)) if s_t != 0 else 0.0
    err = cond * np.finfo(float).eps * max(abs(value), np.finfo(float).tiny)
    return min(max(value, 0.0), 1.0), float(err)


def _gap_exact_mp(q: GapQuery, dps: int) -> float:
    a, lam, _ = _exponents(q)
    with mpmath.workdps(dps):
        t = mpmath.mpf(q.threshold)
        upper = q.kind == "min_above_s"
        m_t = mpmath.matrix(q.p, q.p)
        m_f = mpmath.matrix(q.p, q.p)
        for j in range(q.p):
            for k in range(q.p):
                aj = mpmath.mpf(int(a[j, k]))
                lk = mpmath.mpf(lam[j, k])
                scale = lk**aj * mpmath.gamma(aj)
                x = t / lk
                frac = (
                    mpmath.gammainc(aj, x, mpmath.inf, regularized=True)
                    if upper
                    else mpmath.gammainc(aj, 0, x, regularized=True)
                )
                m_f[j, k] = scale
                m_t[j, k] = scale * frac
        den = mpmath.det(m_f)
        if den == 0:
            raise IllConditioned(f"determinant vanished at dps={dps}; increase dps")
        value = mpmath.det(m_t) / den
        return float(min(max(value, 0), 1))


@dataclass(frozen=True)
class QuadratureSpec:
    """Trapezoidal rule on the parabolic contour ``z = mu (1 + i u)^2``.

    The step starts at ``h0`` and is halved until two successive levels
    agree to ``rtol``; ``u`` is truncated where ``exp(-mu u^2)`` drops
    below ``exp(-cutoff)``.
    """

    mu: float = 1.0
    h0: float = 0.4
    rtol: float = 1e-10
    max_levels: int = 6
    cutoff: float = 45.0
    chunk: int = 200_000


@dataclass(frozen=True)
class MatrixModelResult:
    value: float
    imag_residual: float
    error_estimate: float
    nodes_per_dim: int


def _vandermonde_sq(z: np.ndarray) -> np.ndarray:
    out = np.ones(z.shape[:-1], dtype=complex)
    for i, j in itertools.combinations(range(z.shape[-1]), 2):
        out *= (z[..., i] - z[..., j]) ** 2
    return out


def _contour_integral(n: int, lambdas, t: float | None, spec: QuadratureSpec, h: float):
    umax = math.sqrt(spec.cutoff / spec.mu + 1.0)
    m = int(math.ceil(umax / h))
    u = h * np.arange(-m, m + 1)
    w1 = 1.0 + 1j * u
    z1 = spec.mu * w1**2
    dz1 = 2j * spec.mu * w1 * h
    # single-variable factor e^z z^-n prod_k (1 + z L_k/t)^-1 dz
    g = np.exp(z1) * z1 ** (-n) * dz1
    if t is not None:
        for lam in lambdas:
            g = g / (1.0 + z1 * (lam / t))
    if n == 1:
        return complex(np.sum(g)), u.size
    # tensor product over the remaining n dims, chunked over the first axis
    total = 0.0 + 0.0j
    grids = np.meshgrid(*([np.arange(u.size)] * n), indexing="ij")
    idx = np.stack([gr.ravel() for gr in grids], axis=-1)
    for start in range(0, idx.shape[0], spec.chunk):
        block = idx[start : start + spec.chunk]
        zb = z1[block]
        vals = _vandermonde_sq(zb) * np.prod(g[block], axis=-1)
        total += np.sum(vals)
    return complex(total), u.size


def matrix_model_integral(q: GapQuery, quad: QuadratureSpec = QuadratureSpec()) -> MatrixModelResult:
    """Normalised matrix-model integral for P(x_max <= t), with diagnostics."""
    _check_beta(q)
    if q.kind != "max_below_t":
        raise ValueError("the matrix model route covers max_below_t only")
    if q.n > 3:
        raise ValueError("tensor quadrature is limited to n <= 3")
    lambdas = [float(v) for v in q.spectrum.lambdas]
    h = quad.h0
    prev = None
    err = math.inf
    for _ in range(quad.max_levels):
        num, nodes = _contour_integral(q.n, lambdas, q.threshold, quad, h)
        den, _ = _contour_integral(q.n, lambdas, None, quad, h)
        ratio = num / den
        if prev is not None:
            err = abs(ratio - prev)
            if err <= quad.rtol * abs(ratio):
                imag = abs(ratio.imag) / abs(ratio) if ratio != 0 else 0.0
                if imag > 1e-6:
                    raise QuadratureNotConverged("imaginary residual above 1e-6", imag)
                return MatrixModelResult(
                    value=float(ratio.real),
                    imag_residual=float(imag),
                    error_estimate=float(err),
                    nodes_per_dim=nodes,
                )
        prev = ratio
        h /= 2.0
    raise QuadratureNotConverged("contour quadrature refinement exhausted", err)


def gap_max_matrix_model_beta2(q: GapQuery, quad: QuadratureSpec = QuadratureSpec()) -> float:
    return matrix_model_integral(q, quad).value


def positive_definite_indicator(A: np.ndarray):
    """1 if the Hermitian matrix A is positive definite, else 0.

    Works on stacks of matrices (leading axes), returning an int array.
    """
    eigs = np.linalg.eigvalsh(A)
    out = np.all(eigs > 0.0, axis=-1).astype(int)
    return int(out) if out.ndim == 0 else out
