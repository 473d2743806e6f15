"""One-dimensional diffusions and diffusion approximations of birth-death chains.

A :class:`DiffusionSpec` describes ``df/dt = d/dx(eps D f' - b f)``. The
toolkit computes its potential ``Psi = -int b/D``, stationary density,
passage times and fluxes. Three constructions map a rate expansion onto
such a spec:

* Kramers-Moyal truncation at order ``1/V``;
* the diffusion whose stationary law has the exact leading-order
  potential (named ``hgtt`` here), ``D = (mu0 - lambda0)/log(mu0/lambda0)``;
* the effective coefficients obtained by matching passage times.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from ._quadrature import integrate, log_integrate, log_nested_integral
from .asymptotics import SERIES_SWITCH
from .errors import DomainError, QuadratureError, SingularIntegrandError
from .model import RateExpansion

EDGE_MARGIN = 1e-6


@dataclass(frozen=True)
class DiffusionSpec:
    """Drift ``b``, scaled diffusion ``D`` and noise strength ``epsilon``.

    The physical diffusion coefficient is ``epsilon * D``. Approximations
    of a birth-death chain use ``epsilon = 1/V`` with an ``O(1)`` ``D``.
    ``Psi`` is measured from ``origin``.
    """

    D: Callable
    b: Callable
    epsilon: float
    domain: tuple[float, float]
    provenance: str = "user"
    origin: float = 0.0

    def __post_init__(self):
        lo, hi = self.domain
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise DomainError(f"domain must be a finite interval, got {self.domain}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")

    def physical_D(self, x):
        return self.epsilon * np.asarray(self.D(x), dtype=float)


def _check_positive_D(spec, lo, hi, n=513):
    if lo == hi:
        return
    a, b = min(lo, hi), max(lo, hi)
    span = b - a
    grid = np.linspace(a + EDGE_MARGIN * span, b - EDGE_MARGIN * span, n)
    values = np.asarray(spec.D(grid), dtype=float)
    bad = np.flatnonzero(~(values > 0))
    if bad.size:
        loc = float(grid[bad[0]])
        raise SingularIntegrandError(f"diffusion coefficient is not positive at x={loc:.6g}", loc)


def psi(spec: DiffusionSpec, x):
    """Potential ``Psi(x) = -int_origin^x b/D`` by adaptive quadrature."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(xs)
    f = lambda z: -float(spec.b(z)) / float(spec.D(z))
    for i, xi in enumerate(xs):
        _check_positive_D(spec, spec.origin, xi)
        out[i] = integrate(f, spec.origin, xi, epsabs=1e-11, epsrel=1e-11)[0]
    return out if np.ndim(x) else float(out[0])


@dataclass(frozen=True)
class PsiPotential:
    """``Psi`` tabulated over the diffusion's domain with Hermite interpolation."""

    x: np.ndarray
    values: np.ndarray
    error_estimate: float
    _spline: CubicHermiteSpline

    def __call__(self, x):
        return self._spline(x)


def psi_potential(spec: DiffusionSpec, n_nodes: int = 2001) -> PsiPotential:
    """Tabulate ``Psi`` on the domain using the exact slope ``-b/D``."""
    lo, hi = spec.domain
    _check_positive_D(spec, lo, hi)
    nodes = np.linspace(lo, hi, n_nodes)
    nodes = np.unique(np.concatenate([nodes, [spec.origin]] if lo < spec.origin < hi else [nodes]))
    f = lambda z: -float(spec.b(z)) / float(spec.D(z))
    anchor = int(np.argmin(np.abs(nodes - spec.origin)))
    start, err = integrate(f, spec.origin, nodes[anchor], epsabs=1e-13, epsrel=1e-13)
    values = np.empty_like(nodes)
    values[anchor] = start
    for i in range(anchor + 1, len(nodes)):
        v, e = integrate(f, nodes[i - 1], nodes[i], epsabs=1e-13, epsrel=1e-13)
        values[i] = values[i - 1] + v
        err += e
    for i in range(anchor - 1, -1, -1):
        v, e = integrate(f, nodes[i + 1], nodes[i], epsabs=1e-13, epsrel=1e-13)
        values[i] = values[i + 1] + v
        err += e
    slope = -np.asarray(spec.b(nodes), dtype=float) / np.asarray(spec.D(nodes), dtype=float)
    return PsiPotential(nodes, values, err, CubicHermiteSpline(nodes, values, slope))


def diffusion_stationary_logdensity(spec: DiffusionSpec, x, potential: PsiPotential | None = None):
    """``log f(x) = -Psi(x)/epsilon - log A`` normalized over the domain."""
    potential = potential or psi_potential(spec)
    lo, hi = spec.domain
    log_norm = log_integrate(lambda y: -potential(y) / spec.epsilon, lo, hi)
    if not math.isfinite(log_norm):
        raise QuadratureError("stationary density is not normalizable on the domain")
    return -np.asarray(potential(x)) / spec.epsilon - log_norm


def log_density_gradient(spec: DiffusionSpec, x):
    """``d log f / dx = b / (epsilon D)``."""
    return np.asarray(spec.b(x), dtype=float) / (spec.epsilon * np.asarray(spec.D(x), dtype=float))


def _mirror(spec: DiffusionSpec) -> DiffusionSpec:
    lo, hi = spec.domain
    return DiffusionSpec(lambda y: spec.D(-np.asarray(y)), lambda y: -np.asarray(spec.b(-np.asarray(y))),
                         spec.epsilon, (-hi, -lo), spec.provenance, -spec.origin)


def diffusion_mfpt(spec: DiffusionSpec, x0: float, x1: float, x2: float, rtol: float = 1e-10,
                   potential: PsiPotential | None = None) -> float:
    """Mean passage time from ``x1`` to ``x2`` with a reflecting wall at ``x0``.

    ``T = int_x1^x2 e^{Psi(z)/eps}/D(z) int_x0^z e^{-Psi(y)/eps} dy dz``
    for ``x0 <= x1 < x2``. A leftward passage (``x2 < x1 <= x0``) is
    handled by reflecting the line.
    """
    if x2 < x1:
        if not x0 >= x1:
            raise DomainError("leftward passage needs the reflecting wall above the start")
        return diffusion_mfpt(_mirror(spec), -x0, -x1, -x2, rtol)
    if not x0 <= x1:
        raise DomainError(f"need x0 <= x1 <= x2, got {x0}, {x1}, {x2}")
    if x1 == x2:
        return 0.0
    lo, hi = spec.domain
    if x0 < lo or x2 > hi:
        raise DomainError("passage interval leaves the diffusion's domain")
    potential = potential or psi_potential(spec)
    eps = spec.epsilon
    log_outer = lambda z: potential(z) / eps - np.log(spec.D(z))
    log_inner = lambda y: -potential(y) / eps
    return math.exp(log_nested_integral(log_outer, log_inner, x0, x1, x2, rtol=rtol))


def stationary_flux(spec: DiffusionSpec, x1: float, x2: float, rtol: float = 1e-10,
                    potential: PsiPotential | None = None) -> float:
    """Flux through ``x2`` of the renewal setup, from
    ``1/J = int_x1^x2 e^{-Psi(y)/eps} int_y^x2 e^{Psi(z)/eps}/D(z) dz dy``.

    Returns ``inf`` with a warning when ``x1 == x2``.
    """
    if x1 == x2:
        warnings.warn("zero-length interval: flux diverges", RuntimeWarning, stacklevel=2)
        return math.inf
    if not x1 < x2:
        raise DomainError(f"need x1 < x2, got {x1}, {x2}")
    potential = potential or psi_potential(spec)
    eps = spec.epsilon
    # substitute y = -s, z = -t so the inner integral runs from a fixed lower limit
    log_outer = lambda s: -potential(-s) / eps
    log_inner = lambda t: potential(-t) / eps - np.log(spec.D(-t))
    return math.exp(-log_nested_integral(log_outer, log_inner, -x2, -x2, -x1, rtol=rtol))


def cycle_flux(spec: DiffusionSpec, x1: float, x2: float, T12: float, T21: float,
               potential: PsiPotential | None = None) -> float:
    """Net flux around a ring closing ``[x1, x2]``, from the two passage times."""
    if potential is not None:
        p1, p2 = float(potential(x1)), float(potential(x2))
    else:
        p1, p2 = psi(spec, x1), psi(spec, x2)
    ref = min(p1, p2)
    e1 = math.exp(-(p1 - ref) / spec.epsilon)
    e2 = math.exp(-(p2 - ref) / spec.epsilon)
    denominator = T12 * e2 + T21 * e1
    if denominator == 0 or not math.isfinite(denominator):
        raise DomainError("cycle flux denominator is zero or not finite")
    return (e2 - e1) / denominator


# ---------------------------------------------------------------------------
# Approximations of a birth-death chain

def km_approx(exp: RateExpansion, V: float, x_max: float | None = None) -> DiffusionSpec:
    """Kramers-Moyal truncation at order ``1/V``.

    Physical coefficients: ``D = (mu0+lambda0)/(2V) + (lambda1+mu1+lambda0'-mu0')/(2V^2)``
    and ``b = mu0-lambda0 + (mu1-lambda1-(lambda0'+mu0')/2)/V``; stored with
    ``epsilon = 1/V`` and ``D`` scaled by ``V``.
    """
    def D(x):
        return (0.5 * (exp.mu0(x) + exp.lambda0(x))
                + (exp.lambda1(x) + exp.mu1(x) + exp.lambda0_prime(x) - exp.mu0_prime(x)) / (2 * V))

    def b(x):
        return (exp.mu0(x) - exp.lambda0(x)
                + (exp.mu1(x) - exp.lambda1(x) - 0.5 * (exp.lambda0_prime(x) + exp.mu0_prime(x))) / V)

    return DiffusionSpec(D, b, 1.0 / V, (EDGE_MARGIN, x_max or 10.0), "kramers-moyal")


def _log_ratio_factor(mu0, lam0):
    """``(r - 1)/log r`` with ``r = mu0/lambda0``, series near ``r = 1``."""
    mu0 = np.asarray(mu0, dtype=float)
    lam0 = np.asarray(lam0, dtype=float)
    if np.any(mu0 <= 0) or np.any(lam0 <= 0):
        raise SingularIntegrandError("mu0 and lambda0 must be positive", float("nan"))
    u = mu0 / lam0 - 1
    near = np.abs(u) < SERIES_SWITCH
    safe = np.where(near, 1.0, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        full = safe / np.log1p(safe)
    return np.where(near, 1 + u / 2 - u ** 2 / 12, full)


def hgtt_diffusion(exp: RateExpansion, x):
    """``D = (mu0 - lambda0)/(log mu0 - log lambda0)``; tends to ``lambda0`` at equality."""
    lam0 = exp.lambda0(x)
    return lam0 * _log_ratio_factor(exp.mu0(x), lam0)


def hgtt_approx(exp: RateExpansion, V: float, x_max: float | None = None) -> DiffusionSpec:
    """Diffusion with ``b = mu0 - lambda0`` whose potential is exactly ``phi0``."""
    D = lambda x: hgtt_diffusion(exp, x)
    b = lambda x: exp.mu0(x) - exp.lambda0(x)
    return DiffusionSpec(D, b, 1.0 / V, (EDGE_MARGIN, x_max or 10.0), "hgtt")


def effective_diffusion(exp: RateExpansion, x, V: float = 1.0):
    """Coefficients of the passage-time matched diffusion.

    Returns
    -------
    D_tilde, b_tilde, psi_correction
        ``D_tilde = D_h^2/mu0`` and ``b_tilde = D_h (mu0 - lambda0)/mu0`` with
        ``D_h`` the ``hgtt`` coefficient, and the potential shift
        ``log((mu0/lambda0 - 1)/(log mu0 - log lambda0))/V`` to add to ``Phi``.
    """
    mu0, lam0 = exp.mu0(x), exp.lambda0(x)
    factor = _log_ratio_factor(mu0, lam0)
    d_h = lam0 * factor
    return d_h ** 2 / mu0, d_h * (mu0 - lam0) / mu0, np.log(factor) / V


def effective_approx(exp: RateExpansion, V: float, x_max: float | None = None) -> DiffusionSpec:
    D = lambda x: effective_diffusion(exp, x)[0]
    b = lambda x: effective_diffusion(exp, x)[1]
    return DiffusionSpec(D, b, 1.0 / V, (EDGE_MARGIN, x_max or 10.0), "effective")


def hu_residual(exp: RateExpansion, x, phi0prime):
    """``mu0 (e^{p} - 1) + lambda0 (e^{-p} - 1)`` for slope ``p``; zero at ``p = log(lambda0/mu0)``."""
    p = np.asarray(phi0prime, dtype=float)
    return exp.mu0(x) * np.expm1(p) + exp.lambda0(x) * np.expm1(-p)


def comparison_table(exp: RateExpansion, V: float, xs) -> dict[str, np.ndarray]:
    """Columns of the diffusion comparison on the grid ``xs``."""
    xs = np.asarray(xs, dtype=float)
    km = km_approx(exp, V)
    hg = hgtt_approx(exp, V)
    d_tilde = effective_diffusion(exp, xs, V)[0]
    return {
        "x": xs,
        "D_km": km.D(xs),
        "D_hgtt": hg.D(xs),
        "D_tilde": d_tilde,
        "b": exp.b(xs),
        "phi0_prime": np.log(exp.lambda0(xs) / exp.mu0(xs)),
        "gradient_km": 2 * V * (exp.mu0(xs) - exp.lambda0(xs)) / (exp.mu0(xs) + exp.lambda0(xs)),
        "gradient_hgtt": log_density_gradient(hg, xs),
    }
