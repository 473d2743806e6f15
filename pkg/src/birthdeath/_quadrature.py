"""Quadrature helpers: checked adaptive quadrature and log-space integrals.

Single integrals go through QUADPACK (``scipy.integrate.quad``) with
failures turned into exceptions. Peaked double integrals of the form
``int_a^b e^{f(z)} int_c^z e^{g(y)} dy dz`` use composite Gauss-Legendre
panels evaluated in log space, refined by halving until two levels agree.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp

from .errors import QuadratureError

GAUSS_ORDER = 10
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(GAUSS_ORDER)


def integrate(f, a: float, b: float, epsabs: float = 1e-10, epsrel: float = 1e-10,
              points=None, limit: int = 400) -> tuple[float, float]:
    """Adaptive Gauss-Kronrod integral of ``f`` over ``[a, b]``.

    Returns
    -------
    value, abserr : float

    Raises
    ------
    QuadratureError
        When QUADPACK reports that the tolerance was not met.
    """
    if a == b:
        return 0.0, 0.0
    if points is not None:
        lo, hi = min(a, b), max(a, b)
        points = [p for p in points if lo < p < hi] or None
    out = quad(f, a, b, epsabs=epsabs, epsrel=epsrel, limit=limit, points=points,
               full_output=1)
    value, err = out[0], out[1]
    if len(out) > 3 and out[3]:
        # QUADPACK sometimes flags round-off even though the estimate is fine
        if not (math.isfinite(value) and err <= max(epsabs, epsrel * abs(value)) * 100):
            raise QuadratureError(f"quadrature on [{a}, {b}] failed: {out[3].splitlines()[0]}")
    if not math.isfinite(value):
        raise QuadratureError(f"quadrature on [{a}, {b}] produced {value}")
    return float(value), float(err)


def log_integrate(log_f, a: float, b: float, n_probe: int = 2049,
                  epsrel: float = 1e-12) -> float:
    """``log int_a^b exp(log_f(y)) dy`` without overflow.

    The integrand's peak is located on a probe grid and refined; the
    shifted integrand is then handed to adaptive quadrature with the peak
    as a break point.
    """
    if a == b:
        return -math.inf
    grid = np.linspace(a, b, n_probe)
    values = np.asarray(log_f(grid), dtype=float)
    i = int(np.nanargmax(values))
    peak = grid[i]
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_probe - 1)]
    if hi > lo:
        res = minimize_scalar(lambda y: -float(log_f(np.array([y]))[0]), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-14 * max(1.0, abs(peak))})
        if -res.fun > values[i]:
            peak = float(res.x)
    shift = float(log_f(np.array([peak]))[0])
    scalar = lambda y: math.exp(float(log_f(np.array([y]))[0]) - shift)
    value, _ = integrate(scalar, a, b, epsabs=0.0, epsrel=epsrel, points=[peak])
    if value <= 0:
        raise QuadratureError("integrand vanished numerically on the whole interval")
    return shift + math.log(value)


def graded_edges(c: float, a: float, b: float, panels: int, grade_levels: int = 0) -> np.ndarray:
    """Panel edges on ``[c, b]`` with ``a`` as an edge.

    ``grade_levels`` adds geometrically shrinking panels towards ``c`` to
    absorb integrable endpoint singularities there.
    """
    span = b - c
    n_left = int(round(panels * (a - c) / span)) if a > c else 0
    n_left = max(n_left, 1) if a > c else 0
    n_right = max(panels - n_left, 1)
    left = np.linspace(c, a, n_left + 1) if n_left else np.array([c])
    right = np.linspace(a, b, n_right + 1)
    edges = np.concatenate([left, right[1:]])
    if grade_levels:
        first = edges[1] - c
        extra = c + first * 2.0 ** -np.arange(grade_levels, 0, -1)
        edges = np.concatenate([[c], extra, edges[1:]])
    return edges


def _panel_nodes(edges):
    half = np.diff(edges) / 2
    mid = (edges[:-1] + edges[1:]) / 2
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    log_w = np.log(half)[:, None] + np.log(_GL_WEIGHTS)[None, :]
    return nodes, log_w


def log_nested_integral(log_outer, log_inner, c: float, a: float, b: float,
                        rtol: float = 1e-10, panels: int = 64, grade_levels: int = 0,
                        max_panels: int = 2 ** 15) -> float:
    """``log int_a^b e^{log_outer(z)} int_c^z e^{log_inner(y)} dy dz`` for ``c <= a < b``.

    Both functions must accept arrays. The inner integral is accumulated
    panel by panel and reused by every outer node. Panels are halved until
    successive estimates agree to ``rtol``.

    Raises
    ------
    QuadratureError
        If ``max_panels`` is reached first.
    """
    if not c <= a <= b:
        raise ValueError("need c <= a <= b")
    if a == b:
        return -math.inf
    edges = graded_edges(c, a, b, panels, grade_levels)
    previous = None
    while True:
        current = _nested_once(log_outer, log_inner, edges, a)
        if previous is not None and math.isfinite(current):
            if abs(math.expm1(current - previous)) < rtol:
                return current
        if len(edges) - 1 > max_panels:
            raise QuadratureError(
                f"nested quadrature did not settle to {rtol:g} with {len(edges) - 1} panels")
        previous = current
        mids = (edges[:-1] + edges[1:]) / 2
        edges = np.sort(np.concatenate([edges, mids]))


def _nested_once(log_outer, log_inner, edges, a):
    nodes, log_w = _panel_nodes(edges)
    inner_vals = np.asarray(log_inner(nodes.ravel()), dtype=float).reshape(nodes.shape)
    panel_log = logsumexp(inner_vals + log_w, axis=1)
    cumulative = np.concatenate([[-np.inf], np.logaddexp.accumulate(panel_log)])

    outer_panels = np.flatnonzero(edges[:-1] >= a)
    z = nodes[outer_panels]                      # (P, K)
    start = edges[outer_panels][:, None]         # left edge of each outer panel
    # partial inner integral from the panel's left edge up to each node
    half = (z - start) / 2
    sub = start[..., None] + half[..., None] * (1 + _GL_NODES)
    sub_vals = np.asarray(log_inner(sub.ravel()), dtype=float).reshape(sub.shape)
    partial = logsumexp(sub_vals + np.log(_GL_WEIGHTS), axis=-1) + np.log(half)
    inner_at_z = np.logaddexp(cumulative[outer_panels][:, None], partial)

    outer_vals = np.asarray(log_outer(z.ravel()), dtype=float).reshape(z.shape)
    return float(logsumexp(outer_vals + inner_at_z + log_w[outer_panels]))
