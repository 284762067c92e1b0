"""Closed forms for the classical oscillating-mode instability family.

The family u_n = (A_n / n) sin(nx) sinh(ny) solves the Laplace Cauchy
problem on (0, pi) x (0, 1) with zero Dirichlet data on the bottom and
sides and Neumann data psi_n = A_n sin(nx). Choosing

    A_n^2 = (2/pi) (2n / sinh 2n) E^2

saturates the Dirichlet-integral bound int |grad u_n|^2 = E^2, and the
H^{-1/2} data size is then eta_n^2 = 2 E^2 / sinh 2n ~ 4 E^2 e^{-2n}.
Measuring u_n in L^2 up to height T gives the best-possible rates: Holder
with exponent 1 - T below the top, logarithmic at T = 1.

Everything here is evaluated in log-space so the whole range n <= 350 is
reachable without overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "HadamardError",
    "HadamardFamily",
    "N_MAX",
    "logsinh",
    "amplitude",
    "data_error",
    "solution_norm",
    "solution_norm_printed",
    "norm_asymptote",
    "rate_envelope",
    "dirichlet_integral",
    "instability_demo",
    "RateFit",
    "fit_rate",
]

N_MAX = 350  # sinh(2n) in closed forms; log-space keeps this exact


class HadamardError(ValueError):
    pass


def _check_mode(n):
    if not (1 <= int(n) == n):
        raise HadamardError(f"mode index must be a positive integer, got {n!r}")
    if n > N_MAX:
        raise HadamardError(f"mode index {n} exceeds the overflow guard {N_MAX}")


def logsinh(x):
    """log(sinh x) for x > 0, stable for large x."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise HadamardError("logsinh requires positive argument")
    out = x + np.log1p(-np.exp(-2.0 * x)) - math.log(2.0)
    return float(out) if out.ndim == 0 else out


def amplitude(n, E=1.0):
    """Saturating amplitude A_n with A_n^2 = (2/pi)(2n/sinh 2n) E^2."""
    _check_mode(n)
    if E == 0.0:
        return 0.0
    log_a = 0.5 * (math.log(2.0 / math.pi) + math.log(2.0 * n) - logsinh(2.0 * n))
    return E * math.exp(log_a)


def data_error(n, E=1.0):
    """(exact, asymptote): eta_n = E sqrt(2/sinh 2n) and 2 E e^{-n}."""
    _check_mode(n)
    exact = E * math.exp(0.5 * (math.log(2.0) - logsinh(2.0 * n)))
    return exact, 2.0 * E * math.exp(-float(n))


def solution_norm(n, E=1.0, T=1.0):
    """Exact ||u_n||_{L2((0,pi) x (0,T))} for the saturating amplitude.

    ||u_n||^2 = E^2 (sinh(2nT)/(2n) - T) / (n sinh 2n), by direct
    integration of sin^2(nx) sinh^2(ny).
    """
    _check_mode(n)
    if not 0.0 < T <= 1.0:
        raise HadamardError(f"truncation level must be in (0, 1], got {T}")
    # sinh(2nT)/(2n) - T = sum_{k>=1} (2nT)^{2k+1} / ((2k+1)! 2n) > 0
    ls = logsinh(2.0 * n * T) - math.log(2.0 * n)
    bracket = math.exp(ls) - T
    if bracket <= 0.0:  # only from roundoff at tiny T
        return 0.0
    log_sq = math.log(bracket) - math.log(float(n)) - logsinh(2.0 * n)
    return E * math.exp(0.5 * log_sq)


def solution_norm_printed(n, E=1.0, T=1.0):
    """Variant with the (sinh(2nT)/(2n) - 1) bracket; agrees at T = 1."""
    _check_mode(n)
    if not 0.0 < T <= 1.0:
        raise HadamardError(f"truncation level must be in (0, 1], got {T}")
    bracket = math.exp(logsinh(2.0 * n * T) - math.log(2.0 * n)) - 1.0
    if bracket <= 0.0:
        return 0.0
    return E * math.exp(0.5 * (math.log(bracket) - math.log(float(n)) - logsinh(2.0 * n)))


def norm_asymptote(n, E=1.0, T=1.0):
    """Large-n form E e^{n(T-1)} / (n sqrt 2) of the exact norm."""
    _check_mode(n)
    return E * math.exp(n * (T - 1.0)) / (n * math.sqrt(2.0))


def rate_envelope(eta, E=1.0, T=1.0):
    """Best-possible modulus (E/sqrt2)(eta/2E)^{1-T} (log(2E/eta))^{-1}."""
    if not 0.0 < eta < 2.0 * E:
        raise HadamardError("envelope needs 0 < eta < 2E")
    return (
        E
        / math.sqrt(2.0)
        * (eta / (2.0 * E)) ** (1.0 - T)
        / math.log(2.0 * E / eta)
    )


def dirichlet_integral(n, E=1.0, nq=512):
    """Midpoint quadrature of int |grad u_n|^2 over (0,pi) x (0,1).

    Sanity check of the saturating normalization; returns approximately E^2.
    """
    _check_mode(n)
    a = amplitude(n, E)
    xs = (np.arange(nq) + 0.5) * (math.pi / nq)
    ys = (np.arange(nq) + 0.5) * (1.0 / nq)
    X, Y = np.meshgrid(xs, ys)
    gx = a * np.cos(n * X) * np.sinh(n * Y)
    gy = a * np.sin(n * X) * np.cosh(n * Y)
    cell = (math.pi / nq) * (1.0 / nq)
    return float(np.sum(gx**2 + gy**2) * cell)


_CHOICES = {
    "1/n": lambda n, p: 1.0 / n,
    "1/n^p": lambda n, p: n ** (-p),
    "exp(-sqrt(n))": lambda n, p: math.exp(-math.sqrt(n)),
}


def instability_demo(choice="1/n", y=0.1, n_max=50, p=2.0):
    """Table of (n, sup |data_n|, sup |u_n(., y)|) for a vanishing sequence.

    The data column is A_n = choice(n); the solution column is
    (A_n / n) sinh(n y), which blows up for every y > 0 however fast the
    data sequence decays.
    """
    if choice not in _CHOICES:
        raise HadamardError(
            f"choice must be one of {sorted(_CHOICES)}, got {choice!r}"
        )
    if y < 0:
        raise HadamardError("height y must be nonnegative")
    amp = _CHOICES[choice]
    rows = []
    for n in range(1, n_max + 1):
        a = amp(n, p)
        if y == 0.0:
            sup_u = 0.0
        else:
            sup_u = a / n * math.exp(logsinh(n * y))
        rows.append((n, a, sup_u))
    return rows


@dataclass(frozen=True)
class HadamardFamily:
    """Mode range of the saturating family at fixed bound E and level T."""

    E: float = 1.0
    T: float = 1.0
    n_min: int = 1
    n_max: int = 20

    def __post_init__(self):
        if self.E <= 0:
            raise HadamardError("energy bound E must be positive")
        if not 0.0 < self.T <= 1.0:
            raise HadamardError("truncation level T must be in (0, 1]")
        if not 1 <= self.n_min <= self.n_max <= N_MAX:
            raise HadamardError(
                f"mode range must satisfy 1 <= n_min <= n_max <= {N_MAX}"
            )

    def modes(self):
        return list(range(self.n_min, self.n_max + 1))

    def rows(self):
        """(n, A_n, eta_n, norm, asymptote) across the range."""
        out = []
        for n in self.modes():
            eta, _ = data_error(n, self.E)
            out.append(
                (
                    n,
                    amplitude(n, self.E),
                    eta,
                    solution_norm(n, self.E, self.T),
                    norm_asymptote(n, self.E, self.T),
                )
            )
        return out


@dataclass(frozen=True)
class RateFit:
    """Least-squares rate of the norm against the data size."""

    slope: float  # d log(norm) / d log(eta)
    intercept: float
    power_residual: float  # RMS residual of the power-law model
    log_slope: float  # mu in norm ~ (log 1/eta)^{-mu}
    log_residual: float
    log_preferred: bool


def _ols(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    if np.ptp(x) == 0.0:
        raise HadamardError("degenerate fit: regressor has zero variance")
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2)))


def fit_rate(family):
    """Rate of log ||u_n|| against log eta_n over the family's mode range.

    For T < 1 the slope approaches 1 - T (Holder); at T = 1 the power-law
    slope collapses toward 0 and the (log 1/eta)^{-mu} model fits better.
    """
    if family.n_max - family.n_min + 1 < 5:
        raise HadamardError("rate fit needs at least 5 modes")
    rows = family.rows()
    etas = np.array([r[2] for r in rows])
    norms = np.array([r[3] for r in rows])
    if np.any(norms <= 0):
        raise HadamardError("degenerate fit: vanishing norms in range")
    ly = np.log(norms)
    slope, inter, pres = _ols(np.log(etas), ly)
    # log-model regressor uses log(2E/eta), positive for the whole family
    lslope, _, lres = _ols(np.log(np.log(2.0 * family.E / etas)), ly)
    return RateFit(
        slope=slope,
        intercept=inter,
        power_residual=pres,
        log_slope=-lslope,
        log_residual=lres,
        log_preferred=lres < pres,
    )
