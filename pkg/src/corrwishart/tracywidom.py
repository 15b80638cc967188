"""Tracy-Widom distributions for beta = 1, 2, 4.

Everything is built from the Hastings-McLeod solution ``q`` of Painleve II,

    q'' = s q + 2 q^3,    q(s) ~ Ai(s) as s -> +inf,

and three running integrals of it:

    I(s) = int_s^inf q(x) dx
    R(s) = int_s^inf q(x)^2 dx
    U(s) = int_s^inf (x - s) q(x)^2 dx

in terms of which

    log F2(s) = -U(s)
    log F1(s) = -(I(s) + U(s)) / 2
    log F4(s) = log cosh(I(s) / 2) - U(s) / 2      (argument convention below)

The densities come from the analytic derivative of the log-CDF, which only
needs ``q`` and ``R`` (``dU/ds = -R``, ``dI/ds = -q``).

The F4 formula is used with three argument scalings.  ``"scaled"`` is the
original Tracy-Widom one, in which the right-hand side above is evaluated at
``sqrt(2) * s``; ``"unscaled"`` evaluates it at ``s`` directly; and
``"ensemble"`` evaluates it at ``2^(2/3) * s``, which is the soft-edge limit of
Wishart/Laguerre matrices normalised with weight ``exp(-(beta/2) tr W W^+)``,
i.e. the same Johnstone constants for every beta.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import cumulative_simpson, quad, simpson, solve_ivp
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from scipy.special import airy as _scipy_airy

BETAS = (1, 2, 4)
F4_CONVENTIONS = ("scaled", "unscaled", "ensemble")
_F4_ARGUMENT_SCALE = {"scaled": math.sqrt(2.0), "unscaled": 1.0, "ensemble": 2.0 ** (2.0 / 3.0)}

# Chosen by KS distance of the unfitted chi on the desk-scale beta = 4 Wishart
# experiment (see harness.select_f4_convention); the large-p behaviour of the
# bidiagonal Laguerre model points the same way.
DEFAULT_F4_CONVENTION = "ensemble"

TABLE_RANGE = (-10.0, 8.0)
TABLE_STEP = 0.005

# Painleve grid wide enough for the 2^(2/3) argument scaling of F4.
PAINLEVE_RANGE = (-16.0, 13.0)

AIRY_RANGE = (-15.0, 15.0)


class PainleveBlowUp(RuntimeError):
    """The Painleve II integration left the Hastings-McLeod separatrix."""


class ExtrapolationWarning(UserWarning):
    """A Tracy-Widom value was requested outside the tabulated range."""


class AccuracyWarning(UserWarning):
    pass


def airy(s):
    """Return ``(Ai(s), Ai'(s))`` for ``s`` in [-15, 15].

    Accepts scalars or arrays.
    """
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < AIRY_RANGE[0]) or np.any(s_arr > AIRY_RANGE[1]):
        raise ValueError(f"airy argument outside {AIRY_RANGE}")
    ai, aip, _, _ = _scipy_airy(s_arr)
    if ai.ndim == 0:
        return float(ai), float(aip)
    return ai, aip


def _left_asymptotic(s):
    """Hastings-McLeod asymptotic series for s -> -inf."""
    s = np.asarray(s, dtype=float)
    return np.sqrt(-s / 2.0) * (
        1.0 + 1.0 / (8.0 * s**3) - 73.0 / (128.0 * s**6) + 10657.0 / (1024.0 * s**9)
    )


@dataclass(frozen=True)
class PainleveSolution:
    """Hastings-McLeod solution tabulated on a descending grid.

    ``I_q`` is ``int_s^inf q``; ``I_q2_weighted`` is ``int_s^inf (x - s) q^2``,
    assembled from ``R = int_s^inf q^2`` and ``int_s^inf x q^2``.
    """

    grid: np.ndarray
    q: np.ndarray
    q_prime: np.ndarray
    I_q: np.ndarray
    I_q2: np.ndarray
    I_q2_weighted: np.ndarray
    _splines: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def s_min(self) -> float:
        return float(self.grid[-1])

    @property
    def s_max(self) -> float:
        return float(self.grid[0])

    def interpolate(self, name: str, s):
        """Cubic-spline interpolation of one stored quantity at ``s``."""
        spline = self._splines.get(name)
        if spline is None:
            spline = CubicSpline(self.grid[::-1], getattr(self, name)[::-1])
            self._splines[name] = spline
        return spline(s)


def _numerov_relaxation(s, q, max_iter=50):
    """Newton iteration on the Numerov discretisation, ends held fixed."""
    h = s[1] - s[0]
    c = h * h / 12.0
    m = s.size - 2
    for _ in range(max_iter):
        f = s * q + 2.0 * q**3
        df = s + 6.0 * q**2
        resid = q[2:] - 2.0 * q[1:-1] + q[:-2] - c * (f[2:] + 10.0 * f[1:-1] + f[:-2])
        ab = np.zeros((3, m))
        ab[0, 1:] = 1.0 - c * df[2:-1]
        ab[1, :] = -2.0 - 10.0 * c * df[1:-1]
        ab[2, :-1] = 1.0 - c * df[1:-2]
        dq = solve_banded((1, 1), ab, -resid)
        q[1:-1] += dq
        if np.max(np.abs(dq)) <= 1e-14 * max(1.0, np.max(np.abs(q))):
            return q
    raise PainleveBlowUp("Newton relaxation for Painleve II did not converge")


def solve_hastings_mcleod(
    s_min: float = PAINLEVE_RANGE[0],
    s_max: float = PAINLEVE_RANGE[1],
    step: float = 0.005,
) -> PainleveSolution:
    """Solve Painleve II for the Hastings-McLeod solution on [s_min, s_max].

    The equation is first integrated leftward from ``s_max`` with the Airy
    boundary data (DOP853) as far as that direction stays accurate.  The
    resulting profile, continued by the left asymptotic series, seeds a
    Newton relaxation of the fourth-order Numerov scheme with Dirichlet data
    ``q(s_max) = Ai(s_max)`` and the asymptotic value at ``s_min``.  The
    relaxation is well conditioned in both directions, unlike shooting.
    """
    if s_max < 6.0 or s_min > -10.0:
        raise ValueError("need s_min <= -10 and s_max >= 6")
    if not 0.0 < step <= 0.01:
        raise ValueError("step must lie in (0, 0.01]")
    if s_max > AIRY_RANGE[1]:
        raise ValueError(f"s_max must not exceed {AIRY_RANGE[1]}")

    n_steps = int(math.ceil((s_max - s_min) / step))
    s = np.linspace(s_min, s_max, n_steps + 1)
    ai_max, aip_max = airy(s_max)

    s_join = max(s_min, -6.0)
    ivp = solve_ivp(
        lambda x, y: (y[1], x * y[0] + 2.0 * y[0] ** 3),
        (s_max, s_join),
        (ai_max, aip_max),
        method="DOP853",
        rtol=1e-13,
        atol=1e-300,
        dense_output=True,
    )
    if not ivp.success:
        raise PainleveBlowUp(f"leftward integration failed: {ivp.message}")
    right = s >= s_join
    q = np.empty_like(s)
    q[right] = ivp.sol(s[right])[0]
    if np.any(np.abs(q[right]) > 1e3):
        raise PainleveBlowUp(
            "leftward integration blew up; check step and s_max boundary"
        )
    left = ~right
    q[left] = _left_asymptotic(s[left])
    q[0] = _left_asymptotic(s_min)
    q[-1] = ai_max

    q = _numerov_relaxation(s, q)
    if np.any(np.abs(q) > 1e3) or np.any(q <= 0.0):
        raise PainleveBlowUp("relaxed solution left the Hastings-McLeod branch")

    # fourth-order central differences, one-sided second order at the ends
    h = s[1] - s[0]
    qp = np.gradient(q, h, edge_order=2)
    qp[2:-2] = (q[:-4] - 8.0 * q[1:-3] + 8.0 * q[3:-1] - q[4:]) / (12.0 * h)

    def ai_sq(x):
        return _scipy_airy(x)[0] ** 2

    tail_I = quad(lambda x: _scipy_airy(x)[0], s_max, np.inf, epsabs=0, epsrel=1e-12)[0]
    tail_R = quad(ai_sq, s_max, np.inf, epsabs=0, epsrel=1e-12)[0]
    tail_xR = quad(lambda x: x * ai_sq(x), s_max, np.inf, epsabs=0, epsrel=1e-12)[0]

    # integrate from s_max leftward: reverse the grid and integrate in -s
    sd = s[::-1]
    qd = q[::-1]
    I_q = tail_I + cumulative_simpson(qd, x=-sd, initial=0.0)
    R = tail_R + cumulative_simpson(qd**2, x=-sd, initial=0.0)
    xR = tail_xR + cumulative_simpson(sd * qd**2, x=-sd, initial=0.0)
    U = xR - sd * R

    return PainleveSolution(
        grid=sd,
        q=qd,
        q_prime=qp[::-1],
        I_q=I_q,
        I_q2=R,
        I_q2_weighted=U,
    )


def _log_cosh_half(i):
    # log cosh(i/2) without cancellation for small i
    return np.log1p(2.0 * np.sinh(i / 4.0) ** 2)


def _log_cdf_and_slope(sol: PainleveSolution, beta: int, convention: str, x):
    """log F_beta and d/dx log F_beta at ``x`` from the Painleve quantities."""
    scale = _F4_ARGUMENT_SCALE[convention] if beta == 4 else 1.0
    s = scale * np.asarray(x, dtype=float)
    q = sol.interpolate("q", s)
    I = sol.interpolate("I_q", s)
    R = sol.interpolate("I_q2", s)
    U = sol.interpolate("I_q2_weighted", s)
    if beta == 2:
        logf, slope = -U, R
    elif beta == 1:
        logf, slope = -0.5 * (I + U), 0.5 * (q + R)
    elif beta == 4:
        logf = _log_cosh_half(I) - 0.5 * U
        slope = -0.5 * q * np.tanh(0.5 * I) + 0.5 * R
    else:
        raise ValueError(f"beta must be one of {BETAS}")
    return logf, scale * slope


@dataclass(frozen=True)
class TWDistribution:
    """Tabulated Tracy-Widom law with spline interpolation.

    Outside the table the log-CDF is continued by ``a + b |x|^3`` on the
    left and the survival function by ``c exp(-d x^{3/2})`` on the right,
    both matched in value and slope at the table ends.
    """

    beta: int
    convention: str
    chi: np.ndarray
    cdf_table: np.ndarray
    pdf_table: np.ndarray
    log_cdf_table: np.ndarray
    _log_cdf: CubicSpline = field(repr=False, compare=False)
    _pdf: CubicSpline = field(repr=False, compare=False)

    @classmethod
    def build(
        cls,
        beta: int,
        convention: str = DEFAULT_F4_CONVENTION,
        solution: PainleveSolution | None = None,
        chi_range: tuple[float, float] = TABLE_RANGE,
        step: float = TABLE_STEP,
    ) -> "TWDistribution":
        if beta not in BETAS:
            raise ValueError(f"beta must be one of {BETAS}")
        if convention not in F4_CONVENTIONS:
            raise ValueError(f"convention must be one of {F4_CONVENTIONS}")
        if beta != 4:
            convention = "scaled"
        if solution is None:
            solution = painleve_solution()
        lo, hi = chi_range
        chi = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
        logf, slope = _log_cdf_and_slope(solution, beta, convention, chi)
        cdf = np.exp(logf)
        pdf = cdf * slope
        return cls(
            beta=beta,
            convention=convention,
            chi=chi,
            cdf_table=cdf,
            pdf_table=pdf,
            log_cdf_table=logf,
            _log_cdf=CubicSpline(chi, logf),
            _pdf=CubicSpline(chi, pdf),
        )

    @property
    def lo(self) -> float:
        return float(self.chi[0])

    @property
    def hi(self) -> float:
        return float(self.chi[-1])

    def outside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x < self.lo) | (x > self.hi)

    def _tail_params(self):
        # left: log F = a + b |x|^3 ; right: log S = c - d x^{3/2}
        lo, hi = self.lo, self.hi
        g_lo = self.pdf_table[0] / self.cdf_table[0]
        b = -g_lo / (3.0 * lo * lo)
        a = self.log_cdf_table[0] - b * abs(lo) ** 3
        sf_hi = -math.expm1(self.log_cdf_table[-1])
        d = self.pdf_table[-1] / (1.5 * math.sqrt(hi) * sf_hi)
        c = math.log(sf_hi) + d * hi**1.5
        return a, b, c, d

    def log_cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self._log_cdf(np.clip(x, self.lo, self.hi)), dtype=float)
        if np.any(self.outside(x)):
            a, b, c, d = self._tail_params()
            left = x < self.lo
            right = x > self.hi
            out = np.where(left, a + b * np.abs(x) ** 3, out)
            with np.errstate(invalid="ignore"):
                sf = np.exp(c - d * np.abs(x) ** 1.5)
            out = np.where(right, np.log1p(-np.minimum(sf, 0.5)), out)
        return np.minimum(out, 0.0)

    def cdf(self, x):
        """F_beta(x), vectorised and clamped to [0, 1]."""
        return np.clip(np.exp(self.log_cdf(x)), 0.0, 1.0)

    def sf(self, x):
        """1 - F_beta(x) without cancellation in the right tail."""
        return np.clip(-np.expm1(self.log_cdf(x)), 0.0, 1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self._pdf(np.clip(x, self.lo, self.hi)), dtype=float)
        if np.any(self.outside(x)):
            a, b, c, d = self._tail_params()
            left = x < self.lo
            right = x > self.hi
            with np.errstate(invalid="ignore", over="ignore"):
                left_val = np.exp(a + b * np.abs(x) ** 3) * (-3.0 * b * x * x)
                right_val = np.exp(c - d * np.abs(x) ** 1.5) * 1.5 * d * np.sqrt(np.abs(x))
            out = np.where(left, left_val, out)
            out = np.where(right, right_val, out)
        return np.maximum(out, 0.0)

    def quantile(self, u, tol: float = 1e-12):
        """Inverse CDF by vectorised bisection on the table range."""
        u = np.asarray(u, dtype=float)
        if np.any((u < 0.0) | (u > 1.0)):
            raise ValueError("quantile level outside [0, 1]")
        lo = np.full(u.shape, self.lo)
        hi = np.full(u.shape, self.hi)
        n_iter = int(math.ceil(math.log2((self.hi - self.lo) / tol)))
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        out = 0.5 * (lo + hi)
        return float(out) if out.ndim == 0 else out

    def sample(self, size, rng: np.random.Generator):
        return self.quantile(rng.random(size))

    def moments(self) -> tuple[float, float]:
        """Mean and variance by Simpson quadrature over the table."""
        mean = simpson(self.chi * self.pdf_table, x=self.chi)
        second = simpson(self.chi**2 * self.pdf_table, x=self.chi)
        return float(mean), float(second - mean**2)

    def mode(self) -> float:
        k = int(np.argmax(self.pdf_table))
        # parabola through the three table points around the maximum
        y0, y1, y2 = self.pdf_table[k - 1 : k + 2]
        h = self.chi[1] - self.chi[0]
        return float(self.chi[k] + 0.5 * h * (y0 - y2) / (y0 - 2.0 * y1 + y2))


@functools.lru_cache(maxsize=1)
def painleve_solution() -> PainleveSolution:
    return solve_hastings_mcleod()


@functools.lru_cache(maxsize=None)
def tracy_widom(beta: int, convention: str = DEFAULT_F4_CONVENTION) -> TWDistribution:
    """Cached Tracy-Widom table for ``beta`` (and F4 ``convention``)."""
    return TWDistribution.build(beta, convention)


def _warn_if_outside(dist: TWDistribution, chi) -> None:
    if np.any(dist.outside(chi)):
        warnings.warn(
            f"chi outside tabulated range [{dist.lo}, {dist.hi}]; "
            "using asymptotic tail expression",
            ExtrapolationWarning,
            stacklevel=3,
        )


def tw_cdf(beta: int, chi, convention: str = DEFAULT_F4_CONVENTION):
    dist = tracy_widom(beta, convention)
    _warn_if_outside(dist, chi)
    out = dist.cdf(chi)
    return float(out) if np.ndim(out) == 0 else out


def tw_pdf(beta: int, chi, convention: str = DEFAULT_F4_CONVENTION):
    dist = tracy_widom(beta, convention)
    _warn_if_outside(dist, chi)
    out = dist.pdf(chi)
    return float(out) if np.ndim(out) == 0 else out


def fredholm_f2_oracle(chi: float, m: int = 40) -> float:
    """F2(chi) as the Fredholm determinant det(I - K_Ai) on L^2(chi, inf).

    Gauss-Legendre with ``m`` nodes on [chi, max(chi, 0) + 14]; the Airy
    kernel is below 1e-30 beyond the cut.  Independent of the Painleve route.
    """
    if m < 30:
        warnings.warn(
            f"quadrature order m={m} < 30; expect accuracy worse than 1e-6",
            AccuracyWarning,
            stacklevel=2,
        )
    hi = max(chi, 0.0) + 14.0
    nodes, weights = leggauss(m)
    x = chi + 0.5 * (nodes + 1.0) * (hi - chi)
    w = 0.5 * weights * (hi - chi)
    ai, aip, _, _ = _scipy_airy(x)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    kernel = (ai[:, None] * aip[None, :] - aip[:, None] * ai[None, :]) / diff
    np.fill_diagonal(kernel, aip**2 - x * ai**2)
    sw = np.sqrt(w)
    return float(np.linalg.det(np.eye(m) - sw[:, None] * kernel * sw[None, :]))
