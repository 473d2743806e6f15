"""Parameter scans, bistability labels and the enthalpy/entropy split of the potential.

A *family* is any callable mapping a parameter value ``mu`` to a
:class:`~birthdeath.model.RateExpansion`; :func:`model_family` builds one
from a model with a bound scan parameter. Roots of the drift are followed
across the parameter grid by predicting each root's motion from the
implicit-function slope ``dx/dmu = -(db/dmu)/(db/dx)`` and matching the
prediction to the roots found at the next grid value.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, minimize_scalar

from ._quadrature import integrate
from .asymptotics import QUAD_TOL, phi0_prime
from .errors import AbsorbingModelError, DomainError, RefinementRequired
from .exact import Absorption, detect_absorbing, stationary_distribution
from .model import (BirthDeathModel, FixedPoint, RateExpansion, Stability, build_expansion,
                    find_fixed_points)

Family = Callable[[float], RateExpansion]

LOCALIZE_TOL = 1e-8
TANGENCY_TOL = 1e-6


@dataclass(frozen=True)
class ModelFamily:
    """Family ``mu -> expansion of model.with_parameter(mu)``."""

    model: BirthDeathModel

    def __post_init__(self):
        if self.model.scan is None:
            raise DomainError("model has no scan parameter bound")

    def __call__(self, mu: float) -> RateExpansion:
        return build_expansion(self.model.with_parameter(mu))

    @property
    def absorbing(self) -> bool:
        return detect_absorbing(self.model) is Absorption.EXTINCTION


def model_family(model: BirthDeathModel) -> ModelFamily:
    return ModelFamily(model)


# ---------------------------------------------------------------------------
# Root continuation

def _roots(exp: RateExpansion, x_range, n_grid) -> list[FixedPoint]:
    return find_fixed_points(exp, x_range[0], x_range[1], n_grid)


def _root_velocity(family: Family, mu: float, x: float, exp: RateExpansion) -> float:
    h = 1e-6 * max(1.0, abs(mu))
    db_dmu = (family(mu + h).b(x) - family(mu - h).b(x)) / (2 * h)
    slope = exp.b_prime(x)
    return 0.0 if slope == 0 else float(-db_dmu / slope)


def _predict(family, mu, mu_next, exp, roots):
    return np.array([r.location + _root_velocity(family, mu, r.location, exp) * (mu_next - mu)
                     for r in roots])


def _match(predicted: np.ndarray, found: Sequence[FixedPoint]):
    """Optimal one-to-one matching of predicted to found root positions."""
    if len(predicted) == 0 or len(found) == 0:
        return []
    cost = np.abs(predicted[:, None] - np.array([r.location for r in found])[None, :])
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class BifurcationEvent:
    """Deterministic bifurcation localized in the scan parameter.

    ``evidence`` records the root pair on the side where both exist
    (saddle-node) or the crossing roots on both sides (transcritical).
    """

    parameter: float
    kind: str
    location: float
    evidence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _extremum_between(b, lo, hi, sign):
    """Location of the extremum of ``sign * b`` on ``[lo, hi]``."""
    grid = np.linspace(lo, hi, 1025)
    i = int(np.argmax(sign * b(grid)))
    a, c = grid[max(i - 1, 0)], grid[min(i + 1, 1024)]
    res = minimize_scalar(lambda z: -sign * b(z), bounds=(a, c), method="bounded",
                          options={"xatol": 1e-13})
    return float(res.x)


def _localize_saddle_node(family, mu_with, mu_without, window, inner_sign):
    """Bisect on whether the drift's extremum in ``window`` still crosses zero."""
    def has_pair(mu):
        b = family(mu).b
        x = _extremum_between(b, *window, inner_sign)
        return inner_sign * b(x) > 0, x

    a, c = mu_with, mu_without
    while abs(c - a) > LOCALIZE_TOL:
        mid = 0.5 * (a + c)
        if has_pair(mid)[0]:
            a = mid
        else:
            c = mid
    mu = 0.5 * (a + c)
    return mu, has_pair(mu)[1]


def _localize_transcritical(family, mu_a, mu_b, x_a, x_b, x_range, n_grid):
    """Bisect on the sign of ``b'`` at the root that persists through the crossing."""
    sign_a = np.sign(family(mu_a).b_prime(x_a))
    span = max(abs(x_b - x_a), 1e-6)

    def persistent_root(mu):
        guess = x_a + (x_b - x_a) * (mu - mu_a) / (mu_b - mu_a)
        lo, hi = max(x_range[0], guess - 4 * span), min(x_range[1], guess + 4 * span)
        roots = _roots(family(mu), (lo, hi), 513) if hi > lo else []
        if not roots:
            return guess
        return min((r.location for r in roots), key=lambda r: abs(r - guess))

    a, c = mu_a, mu_b
    while abs(c - a) > LOCALIZE_TOL:
        mid = 0.5 * (a + c)
        x = persistent_root(mid)
        if np.sign(family(mid).b_prime(x)) == sign_a:
            a = mid
        else:
            c = mid
    mu = 0.5 * (a + c)
    return mu, persistent_root(mu)


def _is_tangency(exp, x_range):
    """True when the drift comes within round-off-scale distance of zero without a sign change."""
    values = exp.b(np.linspace(*x_range, 4097))
    scale = max(1.0, float(np.max(np.abs(values))))
    return float(np.min(np.abs(values))) <= TANGENCY_TOL * scale


def scan_bifurcations(family: Family, mu_grid: Sequence[float], x_range: tuple[float, float],
                      n_grid: int = 2048) -> list[BifurcationEvent]:
    """Transcritical and saddle-node bifurcations of ``b = mu0 - lambda0`` along ``mu_grid``.

    Parameters
    ----------
    family : callable
        ``mu -> RateExpansion``.
    mu_grid : sequence of float
        Sorted parameter values.
    x_range : (float, float)
        Concentration window searched for roots.

    Raises
    ------
    RefinementRequired
        When root sets of neighbouring grid values cannot be matched.
    """
    mu_grid = np.asarray(mu_grid, dtype=float)
    if np.any(np.diff(mu_grid) <= 0):
        raise DomainError("mu_grid must be strictly increasing")
    exps = [family(mu) for mu in mu_grid]
    roots = [_roots(e, x_range, n_grid) for e in exps]

    # grid values where the drift merely touches zero carry a double root the
    # sign-change search cannot see; they are skipped
    keep = list(range(len(mu_grid)))
    for i in range(1, len(mu_grid) - 1):
        if (len(roots[i - 1]) == len(roots[i + 1]) and len(roots[i]) < len(roots[i - 1])
                and _is_tangency(exps[i], x_range)):
            keep.remove(i)

    events = []
    for i, j in zip(keep[:-1], keep[1:]):
        mu_a, mu_b = mu_grid[i], mu_grid[j]
        ra, rb = roots[i], roots[j]
        delta = len(rb) - len(ra)
        if delta == 0:
            events.extend(_transcritical_events(family, mu_a, mu_b, exps[i], ra, rb, x_range, n_grid))
        elif abs(delta) == 2:
            events.append(_saddle_node_event(family, mu_a, mu_b, exps[i], exps[j], ra, rb, x_range))
        elif abs(delta) == 1 and _edge_crossing(family, mu_a, mu_b, exps[i], exps[j], ra, rb, x_range):
            continue
        else:
            raise RefinementRequired(
                f"root count jumps from {len(ra)} to {len(rb)} between mu={mu_a:.6g} and "
                f"mu={mu_b:.6g}; refine the parameter grid")
    return events


def _edge_crossing(family, mu_a, mu_b, exp_a, exp_b, ra, rb, x_range):
    # a single root leaving or entering through the window edge
    few, many, mu_f, mu_m, exp_f = (ra, rb, mu_a, mu_b, exp_a) if len(ra) < len(rb) else (rb, ra, mu_b, mu_a, exp_b)
    pred = _predict(family, mu_f, mu_m, exp_f, few)
    pairs = _match(pred, many)
    extra = set(range(len(many))) - {c for _, c in pairs}
    width = x_range[1] - x_range[0]
    return all(min(many[k].location - x_range[0], x_range[1] - many[k].location) < 0.1 * width
               for k in extra)


def _transcritical_events(family, mu_a, mu_b, exp_a, ra, rb, x_range, n_grid):
    pred = _predict(family, mu_a, mu_b, exp_a, ra)
    pairs = _match(pred, rb)
    flipped = [(r, c) for r, c in pairs
               if {ra[r].stability, rb[c].stability} == {Stability.STABLE, Stability.UNSTABLE}]
    if len(flipped) < 2:
        return []
    if len(flipped) > 2:
        raise RefinementRequired(
            f"{len(flipped)} roots change stability between mu={mu_a:.6g} and mu={mu_b:.6g}")
    # the root that barely moves is the one that persists through the crossing
    persistent = min(flipped, key=lambda rc: abs(rb[rc[1]].location - ra[rc[0]].location))
    other = [rc for rc in flipped if rc is not persistent][0]
    x_a, x_b = ra[persistent[0]].location, rb[persistent[1]].location
    mu, x = _localize_transcritical(family, mu_a, mu_b, x_a, x_b, x_range, n_grid)
    evidence = {"before": [ra[persistent[0]].location, ra[other[0]].location],
                "after": [rb[persistent[1]].location, rb[other[1]].location]}
    return [BifurcationEvent(mu, "transcritical", x, evidence)]


def _saddle_node_event(family, mu_a, mu_b, exp_a, exp_b, ra, rb, x_range):
    if len(ra) > len(rb):
        many, few, mu_m, mu_f, exp_f = ra, rb, mu_a, mu_b, exp_b
    else:
        many, few, mu_m, mu_f, exp_f = rb, ra, mu_b, mu_a, exp_a
    pred = _predict(family, mu_f, mu_m, exp_f, few)
    pairs = _match(pred, many)
    extra = sorted(set(range(len(many))) - {c for _, c in pairs})
    if len(extra) != 2 or extra[1] != extra[0] + 1:
        raise RefinementRequired(
            f"cannot identify the colliding root pair between mu={mu_a:.6g} and mu={mu_b:.6g}")
    k = extra[0]
    lo = many[k - 1].location if k > 0 else x_range[0]
    hi = many[k + 2].location if k + 2 < len(many) else x_range[1]
    # the extremum stays near the colliding pair; a tight window keeps the
    # search from wandering to unrelated parts of the drift
    sep = many[k + 1].location - many[k].location
    pad = 1e-9 * (hi - lo)
    window = (max(lo + pad, many[k].location - sep), min(hi - pad, many[k + 1].location + sep))
    x_mid = 0.5 * (many[k].location + many[k + 1].location)
    inner_sign = float(np.sign(family(mu_m).b(x_mid)))
    mu, x = _localize_saddle_node(family, mu_m, mu_f, window, inner_sign)
    evidence = {"pair": [many[k].location, many[k + 1].location], "pair_parameter": mu_m}
    return BifurcationEvent(mu, "saddle-node", x, evidence)


# ---------------------------------------------------------------------------
# Maxwell construction

def _phi0_difference(exp: RateExpansion, x_from: float, x_to: float) -> float:
    return integrate(lambda z: float(phi0_prime(exp, z)), x_from, x_to,
                     epsabs=QUAD_TOL, epsrel=QUAD_TOL)[0]


@dataclass(frozen=True)
class PhaseRow:
    mu: float
    branch_id: int
    x_min: float
    phi0_min: float
    is_global: bool


@dataclass(frozen=True)
class PhaseDiagram:
    """Local minima of ``phi0`` tracked over a parameter grid.

    ``phi0_min`` is measured relative to the leftmost minimum at each
    ``mu``. ``transitions`` lists the parameters where the global minimum
    switches between two coexisting branches.
    """

    mu_grid: np.ndarray
    rows: list[PhaseRow]
    transitions: list[dict]

    def rows_at(self, mu: float) -> list[PhaseRow]:
        return [r for r in self.rows if r.mu == mu]


def _check_family_not_absorbing(family, mu):
    exp = family(mu)
    if getattr(family, "absorbing", False) or (exp.mu0(0.0) == 0 and exp.lambda0(0.0) == 0):
        raise AbsorbingModelError(
            "state 0 absorbs this family: its stationary mass sits at extinction for every "
            "parameter value (Keizer's paradox), so the minima of phi0 do not describe the "
            "long-run state; add a small inflow to regularize it")


def _minima(exp, x_range, n_grid):
    stable = [p.location for p in _roots(exp, x_range, n_grid) if p.stability is Stability.STABLE]
    if not stable:
        return [], []
    values = [0.0]
    for a, b in zip(stable[:-1], stable[1:]):
        values.append(values[-1] + _phi0_difference(exp, a, b))
    return stable, values


def _track_branch(family, mu, x_guess, x_range, n_grid):
    exp = family(mu)
    stable = [p.location for p in _roots(exp, x_range, n_grid) if p.stability is Stability.STABLE]
    if not stable:
        raise RefinementRequired(f"branch lost while refining at mu={mu:.10g}")
    return min(stable, key=lambda x: abs(x - x_guess))


def phase_transition_scan(family: Family, mu_grid: Sequence[float], x_range: tuple[float, float],
                          n_grid: int = 2048, threads: int = 1) -> PhaseDiagram:
    """Maxwell construction over ``mu_grid``.

    Each stable root of the drift is a local minimum of ``phi0``; branches
    are continued across ``mu`` and the global minimum is located. Where it
    switches between two branches that both exist, the switching parameter
    is refined by bisection on the sign of the depth difference.

    Raises
    ------
    AbsorbingModelError
        For families where state 0 traps the chain.
    """
    mu_grid = np.asarray(mu_grid, dtype=float)
    if np.any(np.diff(mu_grid) <= 0):
        raise DomainError("mu_grid must be strictly increasing")
    _check_family_not_absorbing(family, mu_grid[0])

    def per_mu(mu):
        exp = family(mu)
        return exp, _minima(exp, x_range, n_grid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(per_mu, mu_grid))
    else:
        results = [per_mu(mu) for mu in mu_grid]

    rows, branch_ids = [], []
    next_id = 0
    previous = None
    for mu, (exp, (xs, values)) in zip(mu_grid, results):
        ids = [-1] * len(xs)
        if previous is not None and xs:
            mu_p, exp_p, xs_p, ids_p = previous
            fps = [FixedPoint(x, Stability.STABLE, 0.0) for x in xs]
            pred = _predict(family, mu_p, mu, exp_p, [FixedPoint(x, Stability.STABLE, 0.0) for x in xs_p])
            for r, c in _match(pred, fps):
                ids[c] = ids_p[r]
        for k in range(len(ids)):
            if ids[k] == -1:
                ids[k] = next_id
                next_id += 1
        g = int(np.argmin(values)) if values else -1
        for k, (x, v) in enumerate(zip(xs, values)):
            rows.append(PhaseRow(float(mu), ids[k], x, v, k == g))
        branch_ids.append((ids, values, xs))
        previous = (mu, exp, xs, ids)

    transitions = []
    for i in range(len(mu_grid) - 1):
        ids_a, vals_a, xs_a = branch_ids[i]
        ids_b, vals_b, xs_b = branch_ids[i + 1]
        if not vals_a or not vals_b:
            continue
        ga, gb = ids_a[int(np.argmin(vals_a))], ids_b[int(np.argmin(vals_b))]
        if ga == gb or ga not in ids_b or gb not in ids_a:
            continue
        transitions.append(_refine_maxwell(family, mu_grid[i], mu_grid[i + 1],
                                           xs_a[ids_a.index(ga)], xs_a[ids_a.index(gb)],
                                           xs_b[ids_b.index(ga)], xs_b[ids_b.index(gb)],
                                           ga, gb, x_range, n_grid))
    return PhaseDiagram(mu_grid, rows, transitions)


def _refine_maxwell(family, mu_a, mu_b, xa_old, xa_new, xb_old, xb_new, id_old, id_new,
                    x_range, n_grid):
    def gap(mu):
        t = (mu - mu_a) / (mu_b - mu_a)
        x_old = _track_branch(family, mu, xa_old + t * (xb_old - xa_old), x_range, n_grid)
        x_new = _track_branch(family, mu, xa_new + t * (xb_new - xa_new), x_range, n_grid)
        # positive while the old branch is still the deeper one
        return _phi0_difference(family(mu), x_old, x_new), x_old, x_new

    sign_a = np.sign(gap(mu_a)[0])
    a, c = mu_a, mu_b
    while abs(c - a) > LOCALIZE_TOL:
        mid = 0.5 * (a + c)
        if np.sign(gap(mid)[0]) == sign_a:
            a = mid
        else:
            c = mid
    mu = 0.5 * (a + c)
    depth, x_old, x_new = gap(mu)
    return {"mu": mu, "from_branch": id_old, "to_branch": id_new,
            "x_from": x_old, "x_to": x_new, "phi0_gap": depth}


# ---------------------------------------------------------------------------
# Bistability

@dataclass(frozen=True)
class BistabilityLabel:
    basin: float
    barrier: float
    phi0_barrier_height: float
    label: str


def classify_bistability(potential, V: float, basins: Sequence[FixedPoint]) -> list[BistabilityLabel]:
    """Label each basin/barrier pair as nonlinear or stochastic bistability.

    Parameters
    ----------
    potential
        Anything with a ``phi0(x)`` method, e.g. a
        :class:`~birthdeath.asymptotics.PotentialGrid`.
    V : float
        System size; sets the indeterminacy band ``|delta phi0| < 10/V``.
    basins : sequence of FixedPoint
        Fixed points of the drift; stable ones are basin minima and
        unstable ones barriers.

    Returns
    -------
    list of BistabilityLabel
        One entry per minimum adjacent to an interior barrier; empty for
        a single basin.
    """
    points = sorted(basins, key=lambda p: p.location)
    labels = []
    tol = 10.0 / V
    for i, p in enumerate(points):
        if p.stability is not Stability.UNSTABLE:
            continue
        neighbours = [q for q in (points[i - 1] if i > 0 else None,
                                  points[i + 1] if i + 1 < len(points) else None)
                      if q is not None and q.stability is Stability.STABLE]
        if len(neighbours) < 2:
            continue
        for q in neighbours:
            height = float(potential.phi0(p.location) - potential.phi0(q.location))
            if abs(height) < tol:
                label = "indeterminate"
            else:
                label = "nonlinear" if height > 0 else "stochastic"
            labels.append(BistabilityLabel(q.location, p.location, height, label))
    return labels


# ---------------------------------------------------------------------------
# Enthalpy / entropy split

@dataclass(frozen=True)
class VanthoffCurves:
    """``Phi = phi0_tilde + phi1_tilde / V`` on lattice points ``x``.

    ``phi0_tilde = d(V Phi)/dV`` at fixed ``x`` and ``phi1_tilde`` the
    remainder.
    """

    x: np.ndarray
    V: float
    phi0_tilde: np.ndarray
    phi1_tilde: np.ndarray
    phi: np.ndarray


def _side_log_derivative(terms, n, V):
    """``d/dV log(rate)`` at states ``n`` from the terms' volume exponents."""
    values = np.stack([t.evaluate(n, V) for t in terms])
    exponents = np.array([t.volume_exponent for t in terms], dtype=float)[:, None]
    total = values.sum(axis=0)
    return (exponents * values).sum(axis=0) / (V * total)


def vanthoff_decompose(model: BirthDeathModel, V: float, x_grid: Sequence[float]) -> VanthoffCurves:
    """Split the exact potential into its ``V``-derivative part and remainder.

    ``phi0_tilde(x) = -[S(n) - d log Z/dV + x log(u_{n-1}/w_n)]`` at
    ``n = xV``, where ``S(n) = sum_{l<n} d/dV log(u_l / w_{l+1})`` is exact
    for power-law ``V``-dependence and ``d log Z/dV`` is the stationary
    mean of ``S``. The derivative in ``n`` is the backward difference.

    Raises
    ------
    AbsorbingModelError
        If state 0 is absorbing.
    DomainError
        If a grid point is not a lattice point ``n/V`` with ``n >= 1``.
    """
    if detect_absorbing(model) is Absorption.EXTINCTION:
        raise AbsorbingModelError("the decomposition needs a non-absorbing model")
    xs = np.asarray(x_grid, dtype=float)
    n_grid = np.rint(xs * V)
    if np.any(np.abs(xs * V - n_grid) > 1e-9 * np.maximum(1.0, xs * V)) or np.any(n_grid < 1):
        raise DomainError("grid points must be lattice points n/V with n >= 1")
    n_grid = n_grid.astype(int)
    dist = stationary_distribution(model, V, n_max=None)
    if n_grid.max() > dist.n_max:
        raise DomainError(f"grid exceeds the support ending at n={dist.n_max}")
    states = np.arange(dist.n_max + 1, dtype=float)
    u, w = model.rate_arrays(states, V)
    steps = (_side_log_derivative(model.birth, states[:-1], V)
             - _side_log_derivative(model.death, states[1:], V))
    S = np.concatenate(([0.0], np.cumsum(steps)))
    dlogz = float(np.sum(dist.p * S))
    log_ratio = np.log(u[n_grid - 1]) - np.log(w[n_grid])
    phi0_tilde = -(S[n_grid] - dlogz + xs * log_ratio)
    phi = -dist.log_p[n_grid] / V
    phi1_tilde = V * (phi - phi0_tilde)
    return VanthoffCurves(xs, float(V), phi0_tilde, phi1_tilde, phi)


# ---------------------------------------------------------------------------
# Writers

PHASE_COLUMNS = ("mu", "branch_id", "x_min", "phi0_min", "is_global")


def write_phase_csv(diagram: PhaseDiagram, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(PHASE_COLUMNS)
        for r in diagram.rows:
            writer.writerow([repr(r.mu), r.branch_id, repr(r.x_min), repr(r.phi0_min),
                             int(r.is_global)])


def write_events_jsonl(events, path) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e if isinstance(e, dict) else e.to_dict()) + "\n")
