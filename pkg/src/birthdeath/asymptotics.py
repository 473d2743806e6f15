"""Large-V asymptotics of the stationary law and of passage times.

The stationary potential ``Phi(x, V) = -(1/V) log p_{xV}`` expands as
``phi0(x) + phi1(x)/V`` with

* ``phi0(x) = int_0^x log(lambda0/mu0)``
* ``phi1(x) = int_0^x (lambda1/lambda0 - mu1/mu0) + log(mu0 lambda0)/2``

both fixed up to an additive constant. From these the module builds the
asymptotic passage-time integral, the Kramers escape time and Laplace
approximations of ``int_0^x exp(-V phi)``. It also provides the
Euler-Maclaurin type expansion of Riemann sums used to derive them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from math import comb

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import CubicHermiteSpline
from scipy.special import dawsn, erf

from ._quadrature import integrate, log_nested_integral
from .errors import DomainError, PreconditionError, QuadratureError, SingularIntegrandError
from .model import RateExpansion

QUAD_TOL = 1e-10
SERIES_SWITCH = 1e-4


# ---------------------------------------------------------------------------
# Summation lemma

def lemma_coefficients(order: int) -> tuple[Fraction, ...]:
    """Taylor coefficients ``nu_1 .. nu_order`` of ``t/(e^t - 1) - 1``.

    These are ``B_l / l!`` with the Bernoulli numbers ``B_1 = -1/2``,
    ``B_2 = 1/6``, ..., generated by ``sum_{k<=m} C(m+1, k) B_k = 0``.
    """
    bern = [Fraction(1)]
    for m in range(1, order + 1):
        bern.append(-sum(comb(m + 1, k) * bern[k] for k in range(m)) / (m + 1))
    return tuple(bern[l] / math.factorial(l) for l in range(1, order + 1))


def _endpoint_slope(f, at, inward):
    # fourth-order one-sided difference pointing into the interval
    h = inward
    vals = [f(at + j * h) for j in range(5)]
    return (-25 * vals[0] + 48 * vals[1] - 36 * vals[2] + 16 * vals[3] - 3 * vals[4]) / (12 * h)


def lemma_sum(F0, F1, F2, x: float, V: float, dF0=None) -> float:
    """Three-term expansion of ``sum_{l=0}^{xV-1} F(l/V, V) / V``.

    ``F(z, V) = F0(z) + F1(z)/V + F2(z)/V**2``; pass ``None`` for absent
    orders. The result is

    ``int F0 + (-(F0(x)-F0(0))/2 + int F1)/V
    + ((F0'(x)-F0'(0))/12 - (F1(x)-F1(0))/2 + int F2)/V**2``

    with all integrals over ``[0, x]``. When ``xV`` is not an integer the
    sum effectively runs to ``floor(xV) - 1`` and the expansion carries an
    extra ``O(1/V)`` mismatch. ``dF0`` is estimated by one-sided finite
    differences when omitted.

    Raises
    ------
    QuadratureError
        If an integrand is not smooth enough for the quadrature.
    """
    if x == 0:
        return 0.0
    nu1, nu2 = lemma_coefficients(2)
    tol = dict(epsabs=1e-12, epsrel=1e-12)
    total = integrate(F0, 0.0, x, **tol)[0]
    order1 = float(nu1) * (F0(x) - F0(0.0))
    order2 = 0.0
    if dF0 is None:
        step = x / 200
        slope_x = _endpoint_slope(F0, x, -step)
        slope_0 = _endpoint_slope(F0, 0.0, step)
    else:
        slope_x, slope_0 = dF0(x), dF0(0.0)
    order2 += float(nu2) * (slope_x - slope_0)
    if F1 is not None:
        order1 += integrate(F1, 0.0, x, **tol)[0]
        order2 += float(nu1) * (F1(x) - F1(0.0))
    if F2 is not None:
        order2 += integrate(F2, 0.0, x, **tol)[0]
    return total + order1 / V + order2 / V ** 2


# ---------------------------------------------------------------------------
# Stochastic potential

def _ratio_log_series(r):
    """``log(r)/(r - 1)`` with the removable singularity at ``r = 1`` filled in."""
    r = np.asarray(r, dtype=float)
    u = r - 1
    near = np.abs(u) < SERIES_SWITCH
    safe_u = np.where(near, 1.0, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        full = np.log(r) / safe_u
    series = 1 - u / 2 + u ** 2 / 3 - u ** 3 / 4
    return np.where(near, series, full)


def phi0_prime(exp: RateExpansion, x):
    return np.log(exp.lambda0(x) / exp.mu0(x))


def phi0_second(exp: RateExpansion, x):
    """``lambda0'/lambda0 - mu0'/mu0``; equals ``-b'/lambda0`` at fixed points."""
    return exp.lambda0_prime(x) / exp.lambda0(x) - exp.mu0_prime(x) / exp.mu0(x)


def phi1_prime(exp: RateExpansion, x):
    lam0, mu0 = exp.lambda0(x), exp.mu0(x)
    return (exp.lambda1(x) / lam0 - exp.mu1(x) / mu0
            + 0.5 * (exp.mu0_prime(x) / mu0 + exp.lambda0_prime(x) / lam0))


def _phi1_drift_part(exp, z):
    return exp.lambda1(z) / exp.lambda0(z) - exp.mu1(z) / exp.mu0(z)


def _leading_zero_order(p: Polynomial) -> int:
    coef = np.trim_zeros(np.asarray(p.coef, dtype=float), "b")
    nz = np.flatnonzero(coef)
    return int(nz[0]) if nz.size else 10 ** 6


def check_integrable(exp: RateExpansion, x: float, with_first_order: bool = False) -> None:
    """Raise if ``mu0`` or ``lambda0`` vanishes or turns negative in ``(0, x]``."""
    if x < 0:
        raise DomainError(f"concentration must be nonnegative, got {x}")
    for name, poly in (("mu0", exp.mu0), ("lambda0", exp.lambda0)):
        roots = [r.real for r in poly.roots() if abs(r.imag) <= 1e-12 * max(1, abs(r))]
        inside = [r for r in roots if 0 < r <= x]
        if inside or poly(x) <= 0 or (x > 0 and poly(x / 2) <= 0):
            loc = min(inside) if inside else x
            raise SingularIntegrandError(f"{name} vanishes or is negative at x={loc:.6g}", loc)
    if with_first_order:
        for name, num, den in (("lambda1/lambda0", exp.lambda1, exp.lambda0),
                               ("mu1/mu0", exp.mu1, exp.mu0)):
            if _leading_zero_order(num) < _leading_zero_order(den):
                raise SingularIntegrandError(f"{name} is not integrable at x=0", 0.0)


def phi0(exp: RateExpansion, x):
    """Leading-order potential ``int_0^x log(lambda0/mu0)``, ``phi0(0) = 0``.

    Accepts a scalar or an array. A logarithmic singularity at 0 (a rate
    coefficient vanishing there) is integrable and handled by the
    quadrature's open endpoint.
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(xs)
    for i, xi in enumerate(xs):
        check_integrable(exp, xi)
        out[i] = integrate(lambda z: float(phi0_prime(exp, z)), 0.0, xi,
                           epsabs=QUAD_TOL, epsrel=QUAD_TOL)[0]
    return out if np.ndim(x) else float(out[0])


def phi1(exp: RateExpansion, x):
    """First-order potential ``int_0^x (lambda1/lambda0 - mu1/mu0) + log(mu0 lambda0)/2``.

    Only differences are meaningful; the constant matches the convention
    of integrating from 0.
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(xs)
    for i, xi in enumerate(xs):
        check_integrable(exp, xi, with_first_order=True)
        drift = integrate(lambda z: float(_phi1_drift_part(exp, z)), 0.0, xi,
                          epsabs=QUAD_TOL, epsrel=QUAD_TOL)[0]
        out[i] = drift + 0.5 * math.log(exp.mu0(xi) * exp.lambda0(xi))
    return out if np.ndim(x) else float(out[0])


@dataclass(frozen=True)
class PotentialGrid:
    """``phi0`` and ``phi1`` tabulated on a grid with Hermite interpolation.

    Node values come from adaptive quadrature panel by panel; the exact
    derivatives make the cubic Hermite interpolant fourth-order accurate.
    Nodes are graded towards 0, where ``phi1`` may diverge
    logarithmically.

    Attributes
    ----------
    x, phi0_nodes, phi1_nodes : ndarray
    rule : str
        Quadrature rule used per panel.
    panels : int
    error_estimate : float
        Accumulated absolute error estimate of the node values.
    """

    x: np.ndarray
    phi0_nodes: np.ndarray
    phi1_nodes: np.ndarray
    rule: str
    panels: int
    error_estimate: float
    _phi0: CubicHermiteSpline
    _phi1: CubicHermiteSpline

    def phi0(self, x):
        return self._phi0(x)

    def phi1(self, x):
        return self._phi1(x)

    def phi(self, x, V: float):
        """``Phi(x, V) = phi0 + phi1/V``."""
        return self._phi0(x) + self._phi1(x) / V

    def metadata(self) -> dict:
        return {"rule": self.rule, "panels": self.panels, "error_estimate": self.error_estimate,
                "x_min": float(self.x[0]), "x_max": float(self.x[-1])}


def build_potential(exp: RateExpansion, x_max: float, n_nodes: int = 2001) -> PotentialGrid:
    """Tabulate ``phi0`` and ``phi1`` on ``(0, x_max]``.

    The first node sits at ``1e-9 * x_max`` so that ``log(mu0 lambda0)``
    stays finite when a rate coefficient vanishes at 0.
    """
    check_integrable(exp, x_max, with_first_order=True)
    start = 1e-9 * x_max
    graded = np.geomspace(start, 0.01 * x_max, 41)
    nodes = np.unique(np.concatenate([graded, np.linspace(0.01 * x_max, x_max, n_nodes)]))
    d0 = lambda z: float(phi0_prime(exp, z))
    d1 = lambda z: float(_phi1_drift_part(exp, z))
    tol = dict(epsabs=1e-13, epsrel=1e-13)
    err = 0.0
    f0 = np.empty_like(nodes)
    f1 = np.empty_like(nodes)
    v0, e0 = integrate(d0, 0.0, nodes[0], **tol)
    v1, e1 = integrate(d1, 0.0, nodes[0], **tol)
    f0[0], f1[0], err = v0, v1, e0 + e1
    for i in range(1, len(nodes)):
        v0, e0 = integrate(d0, nodes[i - 1], nodes[i], **tol)
        v1, e1 = integrate(d1, nodes[i - 1], nodes[i], **tol)
        f0[i] = f0[i - 1] + v0
        f1[i] = f1[i - 1] + v1
        err += e0 + e1
    f1 = f1 + 0.5 * np.log(exp.mu0(nodes) * exp.lambda0(nodes))
    s0 = CubicHermiteSpline(nodes, f0, phi0_prime(exp, nodes), extrapolate=False)
    s1 = CubicHermiteSpline(nodes, f1, phi1_prime(exp, nodes), extrapolate=False)
    return PotentialGrid(nodes, f0, f1, "adaptive Gauss-Kronrod 21-point per panel",
                         len(nodes), err, s0, s1)


# ---------------------------------------------------------------------------
# Passage times

def mfpt_asymptotic(exp: RateExpansion, potential: PotentialGrid, V: float,
                    x: float, x2: float, rtol: float = 1e-8) -> float:
    """Asymptotic mean passage time from ``x`` up to ``x2``.

    Evaluates ``V int_x^x2 P(lambda0/mu0)(z) e^{V Phi(z)} / lambda0(z)
    int_0^z P(mu0/lambda0)(y) e^{-V Phi(y)} dy dz`` with
    ``P(r) = log(r)/(r-1)``, entirely in log space. The inner integral
    starts at the potential grid's first node, a negligible distance from 0.

    Raises
    ------
    QuadratureError
        If the nested quadrature does not converge; ``kramers_time`` is the
        better tool in that regime.
    """
    if x > x2:
        raise DomainError(f"need x <= x2, got {x} > {x2}")
    if x == x2:
        return 0.0
    if x2 > potential.x[-1] or x < potential.x[0]:
        raise DomainError("passage interval exceeds the tabulated potential")
    log_v = math.log(V)

    def log_outer(z):
        lam, mu = exp.lambda0(z), exp.mu0(z)
        return log_v + np.log(_ratio_log_series(lam / mu)) + V * potential.phi(z, V) - np.log(lam)

    def log_inner(y):
        return np.log(_ratio_log_series(exp.mu0(y) / exp.lambda0(y))) - V * potential.phi(y, V)

    try:
        value = log_nested_integral(log_outer, log_inner, float(potential.x[0]), x, x2,
                                    rtol=rtol, panels=128, grade_levels=30)
    except QuadratureError as exc:
        raise QuadratureError(f"{exc}; try kramers_time for large V") from exc
    if value > 709:
        raise QuadratureError(f"passage time exp({value:.1f}) overflows; use kramers_time")
    return math.exp(value)


@dataclass(frozen=True)
class KramersEstimate:
    """Escape time over a barrier from its curvatures and potential differences."""

    V: float
    x1_star: float
    x_ddag: float
    barrier_leading: float
    barrier_correction: float
    prefactor: float
    time: float
    time_leading_only: float
    bistability_class: str

    def to_dict(self) -> dict:
        return asdict(self)


def kramers_time(exp: RateExpansion, V: float, x1_star: float, x_ddag: float,
                 potential: PotentialGrid | None = None) -> KramersEstimate:
    """Kramers escape time from the basin at ``x1_star`` over ``x_ddag``.

    ``T = 2 pi / (lambda0(x_ddag) sqrt(phi0''(x1) |phi0''(x_ddag)|))
    * exp(V (phi0(x_ddag) - phi0(x1)) + phi1(x_ddag) - phi1(x1))``.
    ``time_leading_only`` drops the ``phi1`` difference. Potential
    differences come from ``potential`` when given, else from direct
    quadrature between the two points.

    Raises
    ------
    PreconditionError
        If ``x1_star`` is not a minimum or ``x_ddag`` not a maximum of ``phi0``.
    """
    c_min, c_max = float(phi0_second(exp, x1_star)), float(phi0_second(exp, x_ddag))
    if not c_min > 0:
        raise PreconditionError(f"phi0'' = {c_min:.3g} at x1*={x1_star}; not a basin minimum")
    if not c_max < 0:
        raise PreconditionError(f"phi0'' = {c_max:.3g} at x_ddag={x_ddag}; not a barrier top")
    if potential is not None:
        d0 = float(potential.phi0(x_ddag) - potential.phi0(x1_star))
        d1 = float(potential.phi1(x_ddag) - potential.phi1(x1_star))
    else:
        check_integrable(exp, max(x1_star, x_ddag))
        d0 = integrate(lambda z: float(phi0_prime(exp, z)), x1_star, x_ddag,
                       epsabs=1e-13, epsrel=1e-13)[0]
        d1 = integrate(lambda z: float(_phi1_drift_part(exp, z)), x1_star, x_ddag,
                       epsabs=1e-13, epsrel=1e-13)[0]
        d1 += 0.5 * (math.log(exp.mu0(x_ddag) * exp.lambda0(x_ddag))
                     - math.log(exp.mu0(x1_star) * exp.lambda0(x1_star)))
    prefactor = 2 * math.pi / (float(exp.lambda0(x_ddag)) * math.sqrt(c_min * abs(c_max)))
    return KramersEstimate(
        V=V, x1_star=x1_star, x_ddag=x_ddag,
        barrier_leading=V * d0, barrier_correction=d1, prefactor=prefactor,
        time=prefactor * math.exp(V * d0 + d1),
        time_leading_only=prefactor * math.exp(V * d0),
        bistability_class="nonlinear" if d0 > 0 else "stochastic")


# ---------------------------------------------------------------------------
# Laplace-type log integrals  (1/V) log int_0^x exp(-V phi(y)) dy

def _derivatives(phi, dphi, d2phi):
    if dphi is None:
        dphi = lambda y, h=1e-5: (phi(y - 2 * h) - 8 * phi(y - h) + 8 * phi(y + h)
                                  - phi(y + 2 * h)) / (12 * h)
    if d2phi is None:
        d2phi = lambda y, h=1e-4: (-phi(y - 2 * h) + 16 * phi(y - h) - 30 * phi(y)
                                   + 16 * phi(y + h) - phi(y + 2 * h)) / (12 * h * h)
    return dphi, d2phi


def _interior_extrema(dphi, lo, hi, n=4001):
    grid = np.linspace(lo, hi, n)[1:-1]
    slope = np.array([dphi(y) for y in grid])
    # compare consecutive nonzero slopes so an extremum sitting on a node is not missed
    live = np.flatnonzero(slope != 0)
    signs = np.sign(slope[live])
    flips = np.flatnonzero(signs[:-1] * signs[1:] < 0)
    return [(grid[live[i]] + grid[live[i + 1]]) / 2 for i in flips], slope


def _locate_extremum(phi, dphi, lo, hi, kind):
    from scipy.optimize import brentq
    extrema, _ = _interior_extrema(dphi, lo, hi)
    if len(extrema) != 1:
        raise PreconditionError(
            f"expected exactly one interior {kind} of phi on ({lo}, {hi}), found {len(extrema)}; "
            "split the interval at the extrema and integrate the pieces separately")
    step = (hi - lo) / 4000
    a, b = max(lo, extrema[0] - 2 * step), min(hi, extrema[0] + 2 * step)
    return brentq(dphi, a, b, xtol=1e-15)


def layer_width(V: float, curvature: float) -> float:
    """Half-width ``sqrt(2/(V |phi''|))`` of the Gaussian layer at an extremum."""
    return math.sqrt(2.0 / (V * abs(curvature)))


def laplace_log_min(phi, V: float, x: float, domain_max: float | None = None,
                    dphi=None, d2phi=None, layer_factor: float = 3.0) -> float:
    """``(1/V) log int_0^x exp(-V phi)`` for ``phi`` with one interior minimum.

    The minimum ``x_ddag`` is sought on ``(0, domain_max)`` (default ``x``
    itself, then ``2x`` if none is found). Three regimes:

    * ``x`` left of the layer: endpoint expansion
      ``-phi(x) - log(V|phi'(x)|)/V - phi''(x)/(V phi'(x))**2 / V``;
    * inside ``|x - x_ddag| < layer_factor * width``: Gaussian error-function
      layer ``-phi(x_ddag) + log(sqrt(pi/(2a)) (1 + erf(sqrt(a) (x - x_ddag))))/V``
      with ``a = V phi''(x_ddag)/2``;
    * right of the layer: full Gaussian minus its tail,
      ``-phi(x_ddag) + log(2 pi/(V phi''))/(2V) - e^{-a (x-x_ddag)^2}/(V (x-x_ddag) sqrt(2 pi V phi''))``.

    Raises
    ------
    PreconditionError
        If ``phi`` has several interior extrema on the search interval.
    """
    dphi, d2phi = _derivatives(phi, dphi, d2phi)
    hi = domain_max if domain_max is not None else x
    try:
        x_ddag = _locate_extremum(phi, dphi, 0.0, hi, "minimum")
    except PreconditionError:
        if domain_max is not None:
            raise
        x_ddag = _locate_extremum(phi, dphi, 0.0, 2 * x, "minimum")
    curv = d2phi(x_ddag)
    if not curv > 0:
        raise PreconditionError("interior extremum is not a minimum")
    width = layer_width(V, curv)
    delta = x - x_ddag
    if delta < -layer_factor * width:
        slope = dphi(x)
        return -phi(x) - math.log(V * abs(slope)) / V - d2phi(x) / (V * slope) ** 2
    if delta <= layer_factor * width:
        a = V * curv / 2
        return -phi(x_ddag) + math.log(math.sqrt(math.pi / (4 * a)) * (1 + erf(math.sqrt(a) * delta))) / V
    gauss = math.log(2 * math.pi / (V * curv)) / (2 * V)
    tail = math.exp(-V * curv * delta ** 2 / 2) / (V * delta * math.sqrt(2 * math.pi * V * curv))
    return -phi(x_ddag) + gauss - tail


def laplace_log_max(phi, V: float, x: float, domain_max: float | None = None,
                    dphi=None, d2phi=None, layer_factor: float = 3.0) -> float:
    """``(1/V) log int_0^x exp(-V phi)`` for ``phi`` with one interior maximum.

    The integral collects an endpoint contribution at 0,
    ``e^{-V phi(0)}/(V phi'(0)) (1 - phi''(0)/(V phi'(0)**2))``, and one
    at ``x``, ``-e^{-V phi(x)}/(V phi'(x))``. Near the maximum the latter
    is replaced by its Dawson-function form, which stays finite where
    ``phi'(x)`` vanishes. When ``phi'(0) = 0`` the 0 end contributes half
    a Gaussian instead.
    """
    dphi, d2phi = _derivatives(phi, dphi, d2phi)
    hi = domain_max if domain_max is not None else x
    try:
        x_ddag = _locate_extremum(phi, dphi, 0.0, hi, "maximum")
    except PreconditionError:
        if domain_max is not None:
            raise
        x_ddag = _locate_extremum(phi, dphi, 0.0, 2 * x, "maximum")
    curv = d2phi(x_ddag)
    if not curv < 0:
        raise PreconditionError("interior extremum is not a maximum")
    ref = phi(0.0)
    s0 = dphi(0.0)
    if s0 > 0:
        left = 1 / (V * s0) * (1 - d2phi(0.0) / (V * s0 * s0))
    elif s0 == 0 and d2phi(0.0) > 0:
        left = 0.5 * math.sqrt(2 * math.pi / (V * d2phi(0.0)))
    else:
        raise PreconditionError("phi must increase away from 0 when its only extremum is a maximum")
    delta = x - x_ddag
    width = layer_width(V, curv)
    if abs(delta) <= layer_factor * width:
        a = V * abs(curv) / 2
        root = math.sqrt(a)
        # int_{x_ddag}^{x} e^{-V phi} ~ e^{-V phi(x_ddag)} e^{a delta^2} D(sqrt(a) delta)/sqrt(a)
        right = math.exp(-V * (phi(x_ddag) - ref) + a * delta ** 2) * dawsn(root * delta) / root
    else:
        right = -math.exp(-V * (phi(x) - ref)) / (V * dphi(x))
    total = left + right
    if total <= 0:
        raise QuadratureError("endpoint expansions cancel; V is too small for this method")
    return -ref + math.log(total) / V
