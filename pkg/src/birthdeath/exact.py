"""Exact finite-V results: stationary law, potential and passage times.

Everything is carried in log space. Stationary weights range over
``exp(+-O(V))`` and overflow double precision long before ``V`` gets
interesting.
"""
from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import logsumexp

from .errors import (AbsorbingModelError, DomainError, InfiniteMFPTError, ModelError,
                     TruncationError)
from .model import BirthDeathModel

_LOG_FLOAT_MAX = math.log(np.finfo(float).max)

TAIL_TOL = 1e-12
HARD_CAP = 10 ** 7


class Support(str, Enum):
    FULL = "full"
    ABSORBED = "absorbed-at-0"


class Absorption(str, Enum):
    NONE = "none"
    EXTINCTION = "extinction-at-0"


@dataclass(frozen=True)
class StationaryDistribution:
    """Stationary law on ``0..n_max`` stored as log weights.

    ``log_weight[n]`` is ``log(p_n / p_0)``; ``log_z`` normalizes them.
    ``tail_mass`` is an upper estimate of the relative mass beyond
    ``n_max`` (zero when the support ends there).
    """

    V: float
    n_max: int
    log_weight: np.ndarray
    log_z: float
    support: Support
    tail_mass: float

    @property
    def n(self) -> np.ndarray:
        return np.arange(self.n_max + 1)

    @property
    def x(self) -> np.ndarray:
        return self.n / self.V

    @property
    def log_p(self) -> np.ndarray:
        return self.log_weight - self.log_z

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.log_p)

    def mean(self) -> float:
        return float(np.sum(self.p * self.n))


@dataclass(frozen=True)
class ExactPotential:
    """``Phi(n/V) = -(1/V) log p_n`` on the lattice."""

    x: np.ndarray
    phi: np.ndarray


def _log_weights(u, w):
    # log p_n - log p_0 = sum_{l<n} log(u_l / w_{l+1})
    with np.errstate(divide="ignore"):
        steps = np.log(u[:-1]) - np.log(w[1:])
    return np.concatenate(([0.0], np.cumsum(steps)))


def stationary_distribution(model: BirthDeathModel, V: float,
                            n_max: int | None = None,
                            tail_tol: float = TAIL_TOL,
                            hard_cap: int = HARD_CAP) -> StationaryDistribution:
    """Stationary distribution of the chain reflected at 0.

    Parameters
    ----------
    model : BirthDeathModel
    V : float
        System size.
    n_max : int, optional
        Last state kept. If omitted the range doubles until the estimated
        relative tail mass drops below ``tail_tol``. The estimate bounds the
        tail by a geometric series with the last one-step ratio
        ``u_n / w_{n+1}``, valid once those ratios decrease.
    tail_tol, hard_cap
        Truncation criterion and the largest state count tried.

    Raises
    ------
    TruncationError
        If ``hard_cap`` states are not enough.
    ModelError
        If a death rate vanishes where the birth rate below it does not,
        which makes the weights unbounded.
    """
    if V <= 0:
        raise DomainError(f"system size must be positive, got V={V}")
    u0, _ = model.rate_arrays(np.array([0.0]), V)
    if u0[0] == 0:
        return StationaryDistribution(V, 0, np.zeros(1), 0.0, Support.ABSORBED, 0.0)

    size = n_max if n_max is not None else max(64, int(4 * V))
    while True:
        n = np.arange(size + 2, dtype=float)
        u, w = model.rate_arrays(n, V, validate=False)
        blocked = np.flatnonzero(u[1:size + 1] <= 0)
        if blocked.size:
            # support ends where the birth rate first vanishes; states above
            # are unreachable and may carry meaningless negative rates
            end = int(blocked[0]) + 1
            u, w = model.rate_arrays(n[:end + 1], V)
            _check_death_positive(u, w, end)
            lw = _log_weights(u[:end + 1], w[:end + 1])
            return StationaryDistribution(V, end, lw, float(logsumexp(lw)), Support.FULL, 0.0)
        model.rate_arrays(n, V)  # raises on negative rates
        _check_death_positive(u, w, size)
        lw = _log_weights(u[:size + 1], w[:size + 1])
        log_z = float(logsumexp(lw))
        tail = _tail_estimate(u, w, lw, log_z, size)
        if n_max is not None or tail < tail_tol:
            return StationaryDistribution(V, size, lw, log_z, Support.FULL, tail)
        if size >= hard_cap:
            raise TruncationError(
                f"tail mass {tail:.3g} still above {tail_tol:g} at the cap of {hard_cap} states",
                tail)
        size = min(2 * size, hard_cap)


def _check_death_positive(u, w, last):
    dead = np.flatnonzero(w[1:last + 1] <= 0)
    if dead.size:
        m = int(dead[0]) + 1
        raise ModelError(f"death rate w_{m} vanishes while u_{m - 1} > 0; "
                         "stationary weights are unbounded")


def _tail_estimate(u, w, lw, log_z, size):
    r_now = u[size] / w[size + 1]
    r_before = u[size - 1] / w[size] if size >= 1 else np.inf
    if not (r_now < 1 and r_now <= r_before):
        return math.inf
    return float(math.exp(lw[size] - log_z) * r_now / (1 - r_now))


def exact_potential(dist: StationaryDistribution) -> ExactPotential:
    """Lattice potential ``-(1/V)(log_weight - log_z)``.

    Raises
    ------
    AbsorbingModelError
        For an absorbed support; extinction times are available from
        :func:`mfpt_exact_left`.
    """
    if dist.support is Support.ABSORBED:
        raise AbsorbingModelError(
            "stationary mass sits entirely at n=0; the potential is undefined. "
            "Use mfpt_exact_left for extinction times.")
    return ExactPotential(dist.x, -dist.log_p / dist.V)


# ---------------------------------------------------------------------------
# Mean first passage times

def _passage_rates(model, V, top):
    n = np.arange(top + 1, dtype=float)
    return model.rate_arrays(n, V)


def _log_mfpt_up(u, w, n_start, n_absorb):
    """log MFPT from ``n_start`` up to ``n_absorb``, reflecting at 0.

    ``u`` and ``w`` must cover states ``0..n_absorb``. Each term
    ``p_l / (w_m p_m)`` is rewritten as ``p_l / (u_{m-1} p_{m-1})`` by
    detailed balance, so the rate at the target itself is never used.
    """
    blocked = np.flatnonzero(u[:n_absorb] <= 0)
    if blocked.size:
        raise InfiniteMFPTError(
            f"birth rate u_{int(blocked[0])} = 0 below the target {n_absorb}; "
            "the target is not reached with probability one")
    dead = np.flatnonzero(w[1:n_absorb] <= 0)
    if dead.size:
        raise InfiniteMFPTError(
            f"death rate w_{int(dead[0]) + 1} = 0 on the path; the stationary weights "
            "behind the passage-time formula are unbounded")
    lw = _log_weights(u[:n_absorb], w[:n_absorb])
    prefix = np.logaddexp.accumulate(lw)
    m = np.arange(n_start + 1, n_absorb + 1)
    terms = prefix[m - 1] - np.log(u[m - 1]) - lw[m - 1]
    return float(logsumexp(terms))


def _time_from_log(log_time):
    if log_time > _LOG_FLOAT_MAX:
        warnings.warn(f"mean passage time e^{log_time:.1f} exceeds the float range; "
                      "returning inf", RuntimeWarning, stacklevel=3)
        return math.inf
    return math.exp(log_time)


def _check_order(n_start, n_absorb, upward):
    if n_start < 0 or n_absorb < 0:
        raise DomainError("states must be nonnegative")
    if upward and n_start > n_absorb:
        raise DomainError(f"upward passage needs n_start <= n_absorb, got {n_start} > {n_absorb}")
    if not upward and n_start < n_absorb:
        raise DomainError(f"downward passage needs n_start >= n_absorb, got {n_start} < {n_absorb}")


def mfpt_exact_right(model: BirthDeathModel, V: float, n_start: int, n_absorb: int) -> float:
    """Mean first passage time from ``n_start`` up to ``n_absorb``.

    The chain is reflected at 0 (``w_0`` is ignored). The double sum
    ``sum_m sum_{l<m} p_l / (w_m p_m)`` is evaluated with a running
    log-sum-exp over ``l``, so the cost is linear in ``n_absorb``.

    Examples
    --------
    Three states, unit rates:

    >>> from birthdeath.model import BirthDeathModel, RateTerm
    >>> chain = BirthDeathModel((RateTerm(1, 0, 0),), (RateTerm(1, 0, 0),))
    >>> round(mfpt_exact_right(chain, 1.0, 0, 2), 12)
    3.0
    """
    _check_order(n_start, n_absorb, upward=True)
    if n_start == n_absorb:
        return 0.0
    u, w = _passage_rates(model, V, n_absorb)
    return _time_from_log(_log_mfpt_up(u, w, n_start, n_absorb))


def mfpt_exact_left(model: BirthDeathModel, V: float, n_start: int, n_absorb: int,
                    n_reflect_top: int) -> float:
    """Mean first passage time from ``n_start`` down to ``n_absorb``.

    The chain is reflected at ``n_reflect_top`` (``u`` there is ignored).
    Computed by mirroring ``n -> n_reflect_top - n``, which swaps birth
    and death rates, and reusing the upward formula.
    """
    _check_order(n_start, n_absorb, upward=False)
    if n_start > n_reflect_top:
        raise DomainError(f"n_start {n_start} lies above the reflecting state {n_reflect_top}")
    if n_start == n_absorb:
        return 0.0
    u, w = _passage_rates(model, V, n_reflect_top)
    mirrored_u = w[::-1].copy()
    mirrored_w = u[::-1].copy()
    return _time_from_log(_log_mfpt_up(mirrored_u, mirrored_w, n_reflect_top - n_start,
                                      n_reflect_top - n_absorb))


def _thomas(upper, diag, lower, rhs):
    """Tridiagonal elimination without pivoting, in ``np.longdouble``.

    Stable here because the backward-equation matrix is weakly
    diagonally dominant.
    """
    upper, diag, lower, rhs = (np.asarray(a, dtype=np.longdouble) for a in (upper, diag, lower, rhs))
    N = diag.size
    c = np.zeros(N, dtype=np.longdouble)
    d = np.zeros(N, dtype=np.longdouble)
    c[0] = upper[0] / diag[0] if N > 1 else 0
    d[0] = rhs[0] / diag[0]
    for i in range(1, N):
        pivot = diag[i] - lower[i - 1] * c[i - 1]
        if i < N - 1:
            c[i] = upper[i] / pivot
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / pivot
    x = np.empty(N, dtype=np.longdouble)
    x[-1] = d[-1]
    for i in range(N - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


def mfpt_backward_solve(model: BirthDeathModel, V: float, n_start: int, n_absorb: int) -> float:
    """Upward passage time from the backward equation, as a cross-check.

    Solves ``w_n T_{n-1} - (u_n + w_n) T_n + u_n T_{n+1} = -1`` for
    ``0 <= n < n_absorb`` with ``T_{-1} = T_0`` and ``T_{n_absorb} = 0``
    by tridiagonal elimination. Independent of the stationary-weight
    route. Rows sum to nearly zero, so the system is ill conditioned when
    the passage time is long; the diagonal and the elimination are both
    carried in extended precision.
    """
    _check_order(n_start, n_absorb, upward=True)
    if n_start == n_absorb:
        return 0.0
    u, w = _passage_rates(model, V, n_absorb)
    N = n_absorb
    w = w.copy()
    w[0] = 0.0  # reflecting wall: the T_{-1} = T_0 terms cancel
    u = u.astype(np.longdouble)
    w = w.astype(np.longdouble)
    T = _thomas(u[:N - 1], -(u[:N] + w[:N]), w[1:N], np.full(N, -1.0))
    return float(T[n_start])


def detect_absorbing(model: BirthDeathModel) -> Absorption:
    """Whether state 0 traps the chain.

    Extinction needs ``u_0 = 0`` for every ``V`` and ``w_1 > 0``. Only
    order-0 birth terms contribute to ``u_0`` and only terms of order at
    most 1 to ``w_1``; both are polynomials in ``V``, zero iff each power's
    coefficients cancel.
    """
    def vanishes(terms, max_order):
        by_power = defaultdict(float)
        for t in terms:
            if t.order <= max_order:
                by_power[t.volume_exponent] += t.coefficient
        return all(abs(c) == 0 for c in by_power.values())

    if vanishes(model.birth, 0) and not vanishes(model.death, 1):
        return Absorption.EXTINCTION
    return Absorption.NONE
