"""Birth-death rate laws built from mass-action terms.

A rate law is a finite sum of terms ``c * V**a * n (n-1) ... (n-k+1)``
where ``k`` is the reaction order and ``a`` the power of the system size.
With the mass-action default ``a = 1 - k`` each term divided by ``V``
tends to ``c * x**k`` at fixed concentration ``x = n / V``.

The module evaluates rate laws at integer states, expands them in powers
of ``1/V`` and locates the roots of the deterministic drift.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import brentq

from .errors import DomainError, ModelError

SIDES = ("birth", "death")

# Relative size below which an evaluated rate is treated as an exact zero.
# Needed when terms cancel, e.g. k (N - n) at n = N with N = e_t V not
# exactly representable.
RATE_ZERO_TOL = 1e-12


@dataclass(frozen=True)
class RateTerm:
    """One mass-action term ``coefficient * V**volume_exponent * (n)_order``.

    Parameters
    ----------
    coefficient : float
        Rate constant. May be negative when another term of the same rate
        law compensates it (a conserved total such as ``k (N - n)``); the
        evaluated rate itself is checked for nonnegativity.
    order : int
        Degree of the falling factorial.
    volume_exponent : int, optional
        Power of ``V``; defaults to the mass-action value ``1 - order``.
    """

    coefficient: float
    order: int
    volume_exponent: int | None = None

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 0:
            raise ModelError(f"term order must be a nonnegative integer, got {self.order}")
        object.__setattr__(self, "order", int(self.order))
        if self.volume_exponent is None:
            object.__setattr__(self, "volume_exponent", 1 - self.order)
        elif int(self.volume_exponent) != self.volume_exponent:
            raise ModelError(f"volume exponent must be an integer, got {self.volume_exponent}")
        else:
            object.__setattr__(self, "volume_exponent", int(self.volume_exponent))
        if not np.isfinite(self.coefficient):
            raise ModelError(f"term coefficient must be finite, got {self.coefficient}")
        object.__setattr__(self, "coefficient", float(self.coefficient))

    def evaluate(self, n, V):
        """Value of the term at state(s) ``n`` for system size ``V``."""
        return self.coefficient * float(V) ** self.volume_exponent * falling_factorial(n, self.order)

    def to_dict(self) -> dict:
        return {"c": self.coefficient, "order": self.order, "vexp": self.volume_exponent}


@dataclass(frozen=True)
class ScanBinding:
    """Named scalar written into selected term coefficients.

    ``targets`` holds ``(side, index)`` pairs, ``side`` being ``"birth"``
    or ``"death"``.
    """

    name: str
    targets: tuple[tuple[str, int], ...]

    def __post_init__(self):
        cleaned = []
        for side, index in self.targets:
            if side not in SIDES:
                raise ModelError(f"scan target side must be 'birth' or 'death', got {side!r}")
            cleaned.append((side, int(index)))
        object.__setattr__(self, "targets", tuple(cleaned))


@dataclass(frozen=True)
class BirthDeathModel:
    """Birth rates ``u_n(V)`` and death rates ``w_n(V)`` as term lists."""

    birth: tuple[RateTerm, ...]
    death: tuple[RateTerm, ...]
    scan: ScanBinding | None = None

    def __post_init__(self):
        object.__setattr__(self, "birth", tuple(self.birth))
        object.__setattr__(self, "death", tuple(self.death))
        if self.scan is not None:
            for side, index in self.scan.targets:
                terms = self.birth if side == "birth" else self.death
                if not 0 <= index < len(terms):
                    raise ModelError(f"scan target {side}[{index}] does not exist")

    def terms(self, side: str) -> tuple[RateTerm, ...]:
        if side == "birth":
            return self.birth
        if side == "death":
            return self.death
        raise ModelError(f"unknown side {side!r}")

    def with_parameter(self, value: float) -> "BirthDeathModel":
        """Copy of the model with the scan parameter set to ``value``."""
        if self.scan is None:
            raise ModelError("model has no scan parameter bound")
        birth, death = list(self.birth), list(self.death)
        for side, index in self.scan.targets:
            terms = birth if side == "birth" else death
            terms[index] = replace(terms[index], coefficient=float(value))
        return replace(self, birth=tuple(birth), death=tuple(death))

    def scaled(self, factor: float) -> "BirthDeathModel":
        """Copy with every coefficient multiplied by ``factor`` (time rescaling)."""
        scale = lambda ts: tuple(replace(t, coefficient=t.coefficient * factor) for t in ts)
        return replace(self, birth=scale(self.birth), death=scale(self.death))

    def rate_arrays(self, n, V, validate: bool = True):
        """Birth and death rates at the integer states ``n``.

        Returns
        -------
        u, w : ndarray
            Rates with cancellation round-off snapped to zero.

        Raises
        ------
        ModelError
            If a rate is negative beyond round-off; the message names the
            most negative term and the state.
        """
        n = np.asarray(n, dtype=float)
        return (_side_rates(self.birth, n, V, "birth", validate),
                _side_rates(self.death, n, V, "death", validate))

    def to_dict(self) -> dict:
        out = {"birth": [t.to_dict() for t in self.birth],
               "death": [t.to_dict() for t in self.death]}
        if self.scan is not None:
            out["scan"] = {"name": self.scan.name,
                           "targets": [list(t) for t in self.scan.targets]}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "BirthDeathModel":
        try:
            birth = tuple(_term_from_dict(d) for d in data["birth"])
            death = tuple(_term_from_dict(d) for d in data["death"])
        except (KeyError, TypeError) as exc:
            raise ModelError(f"malformed model description: {exc!r}") from exc
        scan = None
        if data.get("scan") is not None:
            s = data["scan"]
            try:
                scan = ScanBinding(str(s["name"]), tuple(tuple(t) for t in s["targets"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelError(f"malformed scan binding: {exc!r}") from exc
        return cls(birth, death, scan)


def _term_from_dict(d: dict) -> RateTerm:
    return RateTerm(float(d["c"]), d["order"], d.get("vexp"))


def _side_rates(terms, n, V, side, validate):
    if V <= 0:
        raise DomainError(f"system size must be positive, got V={V}")
    if not terms:
        return np.zeros_like(n)
    parts = np.stack([t.evaluate(n, V) for t in terms])
    total = parts.sum(axis=0)
    scale = np.abs(parts).sum(axis=0)
    total = np.where(np.abs(total) <= RATE_ZERO_TOL * scale, 0.0, total)
    if validate and np.any(total < 0):
        bad = int(np.flatnonzero(total < 0)[0])
        worst = int(np.argmin(parts[:, bad]))
        term = terms[worst]
        raise ModelError(
            f"{side} rate is negative ({total[bad]:.6g}) at n={int(n.flat[bad])}, V={V}; "
            f"offending term {side}[{worst}] with c={term.coefficient}, order={term.order}")
    return total


def falling_factorial(n, k: int):
    """``n (n-1) ... (n-k+1)``, elementwise; equals 1 for ``k = 0``."""
    n = np.asarray(n, dtype=float)
    out = np.ones_like(n)
    for j in range(k):
        out = out * (n - j)
    return out


def evaluate_rates(model: BirthDeathModel, V: float, n: int) -> tuple[float, float]:
    """Birth and death rate at a single state.

    Examples
    --------
    >>> u, w = evaluate_rates(keizer(), 10, 5)
    >>> float(u), float(w)
    (10.0, 7.0)
    """
    if n < 0 or int(n) != n:
        raise DomainError(f"state must be a nonnegative integer, got {n}")
    u, w = model.rate_arrays(np.array([n]), V)
    return float(u[0]), float(w[0])


def load_model(path) -> BirthDeathModel:
    """Read a model from its JSON description."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from exc
    return BirthDeathModel.from_dict(data)


def save_model(model: BirthDeathModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# Large-V expansion

@dataclass(frozen=True)
class RateExpansion:
    """First two orders of ``u_{xV}/V`` and ``w_{xV}/V`` in ``1/V``.

    ``mu`` refers to birth, ``lambda`` to death; all members are numpy
    polynomials in the concentration ``x``.
    """

    mu0: Polynomial
    mu1: Polynomial
    lambda0: Polynomial
    lambda1: Polynomial

    @property
    def mu0_prime(self) -> Polynomial:
        return self.mu0.deriv()

    @property
    def lambda0_prime(self) -> Polynomial:
        return self.lambda0.deriv()

    @property
    def b(self) -> Polynomial:
        """Deterministic drift ``mu0 - lambda0``."""
        return self.mu0 - self.lambda0

    @property
    def b_prime(self) -> Polynomial:
        return self.b.deriv()


def _expand_side(terms: Sequence[RateTerm]):
    degree = max((t.order for t in terms), default=0)
    lead = np.zeros(degree + 1)
    first = np.zeros(degree + 1)
    for t in terms:
        k, a, c = t.order, t.volume_exponent, t.coefficient
        if a > 1 - k:
            raise ModelError(
                f"term with order {k} and volume exponent {a} grows faster than V; "
                f"mass-action scaling needs exponent <= {1 - k}")
        if a == 1 - k:
            lead[k] += c
            if k >= 2:
                first[k - 1] += -c * k * (k - 1) / 2
        elif a == -k:
            first[k] += c
        # smaller exponents only contribute at order 1/V**2 and beyond
    return Polynomial(lead), Polynomial(first)


def build_expansion(model: BirthDeathModel) -> RateExpansion:
    """Expand the rate laws to first order in ``1/V``.

    ``u_{xV}(V)/V = mu0(x) + mu1(x)/V + O(1/V**2)``, likewise for ``w``
    with ``lambda0, lambda1``. Exact for polynomial rate laws.
    """
    mu0, mu1 = _expand_side(model.birth)
    lam0, lam1 = _expand_side(model.death)
    return RateExpansion(mu0, mu1, lam0, lam1)


def expansion_from_coefficients(mu0, lambda0, mu1=(0.0,), lambda1=(0.0,)) -> RateExpansion:
    """Expansion from raw power-series coefficients (lowest degree first).

    Handy for drift families that are not tied to a particular term list,
    such as normal forms.
    """
    return RateExpansion(Polynomial(mu0), Polynomial(mu1), Polynomial(lambda0), Polynomial(lambda1))


# ---------------------------------------------------------------------------
# Fixed points

class Stability(str, Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    DEGENERATE = "degenerate"


DEGENERATE_SLOPE = 1e-8


@dataclass(frozen=True)
class FixedPoint:
    """Root of the drift with its linear stability."""

    location: float
    stability: Stability
    drift_slope: float


def classify_slope(slope: float) -> Stability:
    if abs(slope) < DEGENERATE_SLOPE:
        return Stability.DEGENERATE
    return Stability.STABLE if slope < 0 else Stability.UNSTABLE


def find_fixed_points(exp: RateExpansion, x_min: float, x_max: float,
                      n_grid: int = 2048) -> list[FixedPoint]:
    """Roots of ``b(x) = mu0(x) - lambda0(x)`` on ``[x_min, x_max]``.

    Sign changes on a uniform grid are bracketed and polished with Brent's
    method to relative tolerance 1e-12; grid nodes where ``b`` vanishes
    exactly are reported as roots too. A warning suggests a finer grid
    when a dip of ``|b|`` hints at a pair of roots between two nodes.

    Returns
    -------
    list of FixedPoint
        Sorted by location.
    """
    if not x_min < x_max:
        raise DomainError(f"need x_min < x_max, got {x_min}, {x_max}")
    b, slope = exp.b, exp.b_prime
    grid = np.linspace(x_min, x_max, n_grid)
    values = b(grid)
    sign = np.sign(values)
    roots = [float(x) for x in grid[sign == 0]]
    # absolute floor for roots at or near 0, where a relative tolerance is void
    xtol = 1e-15 * max(abs(x_min), abs(x_max))
    for i in np.flatnonzero(sign[:-1] * sign[1:] < 0):
        roots.append(brentq(b, grid[i], grid[i + 1], xtol=xtol, rtol=1e-12, maxiter=500))
    _warn_hidden_pairs(grid, values)
    roots.sort()
    return [FixedPoint(r, classify_slope(float(slope(r))), float(slope(r))) for r in roots]


def _warn_hidden_pairs(grid, values):
    # A parabola through three consecutive samples of one sign whose vertex
    # crosses zero means two roots fell between grid nodes.
    v0, v1, v2 = values[:-2], values[1:-1], values[2:]
    same = (np.sign(v0) == np.sign(v1)) & (np.sign(v1) == np.sign(v2)) & (v1 != 0)
    dip = same & (np.abs(v1) < np.abs(v0)) & (np.abs(v1) < np.abs(v2))
    for i in np.flatnonzero(dip):
        curv = v0[i] - 2 * v1[i] + v2[i]
        if curv == 0:
            continue
        vertex = v1[i] - (v2[i] - v0[i]) ** 2 / (8 * curv)
        if np.sign(vertex) != np.sign(v1[i]):
            warnings.warn(
                f"drift may have two roots near x={grid[i + 1]:.6g} that the grid does not "
                f"separate; retry with n_grid >= {4 * len(grid)}", RuntimeWarning, stacklevel=3)


def stable_points(points: Iterable[FixedPoint]) -> list[FixedPoint]:
    return [p for p in points if p.stability is Stability.STABLE]


# ---------------------------------------------------------------------------
# Reference models

def poisson(alpha: float = 1.0, beta: float = 2.0) -> BirthDeathModel:
    """Constant birth ``alpha V``, linear death ``beta n``."""
    return BirthDeathModel((RateTerm(alpha, 0),), (RateTerm(beta, 1),))


def binomial(k_plus: float = 1.0, k_minus: float = 1.0, total: float = 1.0) -> BirthDeathModel:
    """Conversion ``A <-> B`` with ``total * V`` molecules overall.

    ``u_n = k_plus (total V - n)`` and ``w_n = k_minus n``. ``total * V``
    should be an integer so that the birth rate hits zero exactly.
    """
    return BirthDeathModel((RateTerm(k_plus * total, 0), RateTerm(-k_plus, 1)),
                           (RateTerm(k_minus, 1),))


def keizer(k1: float = 2.0, k_minus1: float = 1.0, k2: float = 1.0) -> BirthDeathModel:
    """Autocatalysis with extinction: ``u_n = k1 n``, ``w_n = k_minus1 n(n-1)/V + k2 n``.

    The birth coefficient is bound as scan parameter ``k1``.
    """
    return BirthDeathModel((RateTerm(k1, 1),), (RateTerm(k_minus1, 2), RateTerm(k2, 1)),
                           ScanBinding("k1", (("birth", 0),)))


def keizer_regularized(k1: float = 2.0, k_minus1: float = 1.0, k2: float = 1.0,
                       inflow: float = 0.01) -> BirthDeathModel:
    """Keizer model plus a constant inflow ``inflow * V`` that removes absorption."""
    base = keizer(k1, k_minus1, k2)
    return replace(base, birth=base.birth + (RateTerm(inflow, 0),))


def schlogl(k1: float = 3.9, k2: float = 1.0, k3: float = 1.0, k4: float = 3.9) -> BirthDeathModel:
    """Schlögl's bistable scheme.

    ``u_n = k1 n(n-1)/V + k3 V`` and ``w_n = k2 n(n-1)(n-2)/V**2 + k4 n``,
    so ``b(x) = -k2 x**3 + k1 x**2 - k4 x + k3``. The defaults place the
    fixed points at 0.4 (stable), 1 (unstable) and 2.5 (stable). The
    constant inflow ``k3`` is bound as scan parameter ``mu``.
    """
    return BirthDeathModel((RateTerm(k1, 2), RateTerm(k3, 0)),
                           (RateTerm(k2, 3), RateTerm(k4, 1)),
                           ScanBinding("mu", (("birth", 1),)))


def schlogl_from_roots(low: float, mid: float, high: float) -> BirthDeathModel:
    """Schlögl model whose drift is ``-(x - low)(x - mid)(x - high)``."""
    k1 = low + mid + high
    k4 = low * mid + low * high + mid * high
    k3 = low * mid * high
    return schlogl(k1=k1, k2=1.0, k3=k3, k4=k4)


REFERENCE_MODELS = {
    "poisson": poisson,
    "binomial": binomial,
    "keizer": keizer,
    "keizer-regularized": keizer_regularized,
    "schlogl": schlogl,
}
