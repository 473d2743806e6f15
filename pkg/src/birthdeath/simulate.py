"""Gillespie simulation and Monte-Carlo passage times.

Randomness comes from the counter-based Threefry-2x32 generator with 20
rounds. Replica ``r`` under seed ``s`` uses key ``(s, r)`` and the event
counter as the block counter, so every replica owns an independent stream
and results do not depend on how replicas are scheduled across threads.
Each block yields the two uniforms one direct-method step needs.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DomainError, InfiniteMFPTError, ModelError
from .exact import Absorption, detect_absorbing
from .model import RATE_ZERO_TOL, BirthDeathModel

SEED_LIMIT = 2 ** 32
_ROTATIONS = np.array([13, 15, 26, 6, 17, 29, 16, 24], dtype=np.uint64)
_PARITY = np.uint64(0x1BD11BDA)
_MASK = np.uint64(0xFFFFFFFF)

# status codes returned by the compiled kernels
_OK, _ABSORBED, _NEGATIVE_RATE, _BUFFER_FULL, _EVENT_CAP, _TABLE_EXCEEDED = 0, 1, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# Threefry-2x32-20

@numba.njit(cache=True, nogil=True)
def _rotl(x, r):
    # 32-bit rotation carried in 64-bit words
    return ((x << r) | (x >> (32 - r))) & _MASK


@numba.njit(cache=True, nogil=True)
def threefry2x32(c0, c1, k0, k1):
    """One Threefry-2x32-20 block on 32-bit words; returns two ``uint32``."""
    ka = np.uint64(k0) & _MASK
    kb = np.uint64(k1) & _MASK
    kc = _PARITY ^ ka ^ kb
    x0 = (np.uint64(c0) + ka) & _MASK
    x1 = (np.uint64(c1) + kb) & _MASK
    for block in range(5):
        base = (block % 2) * 4
        for j in range(4):
            x0 = (x0 + x1) & _MASK
            x1 = _rotl(x1, _ROTATIONS[base + j]) ^ x0
        # key injection: the schedule cycles through (ka, kb, kc)
        ka, kb, kc = kb, kc, ka
        x0 = (x0 + ka) & _MASK
        x1 = (x1 + kb + np.uint64(block + 1)) & _MASK
    return np.uint32(x0), np.uint32(x1)


@numba.njit(cache=True, nogil=True)
def _uniform_pair(event, k0, k1):
    lo = event & _MASK
    hi = event >> np.uint64(32)
    a, b = threefry2x32(lo, hi, k0, k1)
    scale = 2.0 ** -32
    return (np.float64(a) + 0.5) * scale, (np.float64(b) + 0.5) * scale


# ---------------------------------------------------------------------------
# Rates inside compiled code

@numba.njit(cache=True, nogil=True)
def _side_rate(n, V, coef, order, vexp):
    total = 0.0
    scale = 0.0
    for i in range(coef.shape[0]):
        ff = 1.0
        for j in range(order[i]):
            ff *= n - j
        part = coef[i] * V ** vexp[i] * ff
        total += part
        scale += abs(part)
    if abs(total) <= 1e-12 * scale:
        return 0.0
    return total


def _term_arrays(terms):
    return (np.array([t.coefficient for t in terms], dtype=np.float64),
            np.array([t.order for t in terms], dtype=np.int64),
            np.array([t.volume_exponent for t in terms], dtype=np.float64))


MAX_TABLE = 1 << 26


class _RateTable:
    """Birth and death rates tabulated on ``0..size-1``, grown on demand.

    The compiled kernels only read the table; a kernel that walks past its
    end reports it and is rerun on a larger table. Reruns replay the same
    random streams, so results do not depend on the initial size.
    """

    def __init__(self, model: BirthDeathModel, V: float, size: int):
        self.V = float(V)
        self.terms = _term_arrays(model.birth) + _term_arrays(model.death)
        self.array = _rate_table(self.V, int(size), *self.terms)

    def grow(self):
        size = 2 * self.array.shape[0]
        if size > MAX_TABLE:
            raise InfiniteMFPTError(f"the chain wandered beyond state {MAX_TABLE}")
        self.array = _rate_table(self.V, size, *self.terms)


assert RATE_ZERO_TOL == 1e-12  # the compiled snap above hard-codes this tolerance


@numba.njit(cache=True, nogil=True)
def _rate_table(V, size, bc, bo, bv, dc, do, dv):
    table = np.empty((size, 2))
    for n in range(size):
        table[n, 0] = _side_rate(n, V, bc, bo, bv)
        table[n, 1] = _side_rate(n, V, dc, do, dv) if n > 0 else 0.0
    return table


@numba.njit(cache=True, nogil=True)
def _step(n, event, k0, k1, table):
    """Tabulated rates at ``n`` and one direct-method draw.

    Returns (status, holding time, jump).
    """
    if n >= table.shape[0]:
        return _TABLE_EXCEEDED, 0.0, 0
    up = table[n, 0]
    down = table[n, 1]
    if up < 0.0 or down < 0.0:
        return _NEGATIVE_RATE, 0.0, 0
    total = up + down
    if total == 0.0:
        return _ABSORBED, 0.0, 0
    u1, u2 = _uniform_pair(event, k0, k1)
    dt = -math.log(u1) / total
    jump = 1 if u2 * total < up else -1
    return _OK, dt, jump


@numba.njit(cache=True, nogil=True)
def _trajectory_kernel(n0, t_max, hit, k0, k1, capacity, table):
    times = np.empty(capacity, dtype=np.float64)
    states = np.empty(capacity, dtype=np.int64)
    n = n0
    t = 0.0
    carry = 0.0
    count = 0
    status = _OK
    if hit >= 0 and n == hit:
        return times[:0], states[:0], _OK, t
    event = np.uint64(0)
    while True:
        code, dt, jump = _step(n, event, k0, k1, table)
        event += np.uint64(1)
        if code != _OK:
            status = code
            break
        # Kahan-compensated clock
        y = dt - carry
        s = t + y
        carry = (s - t) - y
        if t_max >= 0.0 and s > t_max:
            break
        t = s
        n += jump
        if count == capacity:
            status = _BUFFER_FULL
            break
        times[count] = t
        states[count] = n
        count += 1
        if hit >= 0 and n == hit:
            break
    return times[:count], states[:count], status, t


@numba.njit(cache=True, nogil=True)
def _hitting_kernel(n0, hit, seed, first, last, max_events, out, table):
    """Passage times for replicas ``first..last-1`` written into ``out``."""
    k0 = np.uint32(seed)
    for r in range(first, last):
        k1 = np.uint32(r & 0xFFFFFFFF)
        n = n0
        t = 0.0
        carry = 0.0
        event = np.uint64(0)
        while n != hit:
            if event >= max_events:
                return _EVENT_CAP
            code, dt, jump = _step(n, event, k0, k1, table)
            if code != _OK:
                return code
            event += np.uint64(1)
            y = dt - carry
            s = t + y
            carry = (s - t) - y
            t = s
            n += jump
        out[r - first] = t
    return _OK


@numba.njit(cache=True, nogil=True)
def _occupancy_kernel(n0, n_events, seed, n_max, table):
    occupancy = np.zeros(n_max + 1, dtype=np.float64)
    k0 = np.uint32(seed)
    k1 = np.uint32(0)
    n = n0
    for event in range(n_events):
        code, dt, jump = _step(n, np.uint64(event), k0, k1, table)
        if code != _OK:
            return occupancy, code
        if n <= n_max:
            occupancy[n] += dt
        n += jump
    return occupancy, _OK


# ---------------------------------------------------------------------------
# Public API

def _check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < SEED_LIMIT:
        raise DomainError(f"seed must lie in [0, 2**32), got {seed}")
    return seed


def _raise_status(status, context):
    if status == _NEGATIVE_RATE:
        raise ModelError(f"negative rate met during simulation ({context})")
    if status == _EVENT_CAP:
        raise InfiniteMFPTError(f"event cap reached before the target ({context})")


@dataclass(frozen=True)
class Trajectory:
    """Event times and the state entered at each event.

    ``absorbed`` is set when the chain stopped in a state with zero total
    rate before the stop condition.
    """

    times: np.ndarray
    states: np.ndarray
    seed: int
    n0: int
    absorbed: bool = False

    def __len__(self):
        return len(self.times)


def ssa_trajectory(model: BirthDeathModel, V: float, n0: int, *, t_max: float | None = None,
                   hit_state: int | None = None, seed: int = 0, replica: int = 0,
                   capacity: int = 1 << 16) -> Trajectory:
    """Direct-method trajectory from ``n0`` until ``t_max`` or ``hit_state``.

    Exactly one of the two stop conditions must be given. The result is a
    deterministic function of the arguments.
    """
    if (t_max is None) == (hit_state is None):
        raise DomainError("give exactly one of t_max and hit_state")
    if n0 < 0:
        raise DomainError(f"initial state must be nonnegative, got {n0}")
    if V <= 0:
        raise DomainError(f"system size must be positive, got V={V}")
    seed = _check_seed(seed)
    table = _RateTable(model, V, max(n0, hit_state or 0, int(2 * V)) + 64)
    while True:
        times, states, status, _ = _trajectory_kernel(
            int(n0), -1.0 if t_max is None else float(t_max),
            -1 if hit_state is None else int(hit_state),
            np.uint32(seed), np.uint32(replica), capacity, table.array)
        if status == _BUFFER_FULL:
            capacity *= 4  # the stream is deterministic, so a rerun reproduces the prefix
        elif status == _TABLE_EXCEEDED:
            table.grow()
        else:
            break
    _raise_status(status, f"n0={n0}, seed={seed}")
    return Trajectory(times.copy(), states.copy(), seed, int(n0), status == _ABSORBED)


@dataclass(frozen=True)
class HittingTimeEstimate:
    """Sample mean of passage times with its standard error.

    ``complete`` is False when the wall-clock budget stopped the run; then
    ``replicas`` counts the replicas actually finished.
    """

    mean: float
    stderr: float
    replicas: int
    seed: int
    complete: bool = True

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "replicas": self.replicas,
                "seed": self.seed, "complete": self.complete}


def _merge(a, b):
    # pairwise (count, mean, M2) combination
    na, ma, sa = a
    nb, mb, sb = b
    if na == 0:
        return b
    n = na + nb
    delta = mb - ma
    return n, ma + delta * nb / n, sa + sb + delta * delta * na * nb / n


def default_threads() -> int:
    env = os.environ.get("DGP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def mc_mfpt(model: BirthDeathModel, V: float, n0: int, n_absorb: int, replicas: int,
            seed: int = 0, *, threads: int | None = None, chunk: int = 4096,
            time_budget: float | None = None, max_events: int = 10 ** 10) -> HittingTimeEstimate:
    """Monte-Carlo mean first passage time from ``n0`` to ``n_absorb``.

    Parameters
    ----------
    replicas : int
        At least 2.
    seed : int
        Seed base in ``[0, 2**32)``; replica ``r`` draws from stream ``(seed, r)``.
    threads : int, optional
        Worker threads; defaults to ``DGP_THREADS`` or the CPU count.
    chunk : int
        Replicas per work unit.
    time_budget : float, optional
        Seconds. Once exceeded no new chunk starts and the estimate covers
        the finished chunks only.
    max_events : int
        Per-replica event cap guarding against practically unreachable targets.
    """
    if replicas < 2:
        raise DomainError(f"need at least 2 replicas, got {replicas}")
    if n0 < 0 or n_absorb < 0:
        raise DomainError("states must be nonnegative")
    seed = _check_seed(seed)
    if n0 == n_absorb:
        return HittingTimeEstimate(0.0, 0.0, replicas, seed)
    if n_absorb > n0 and detect_absorbing(model) is Absorption.EXTINCTION and n0 == 0:
        raise InfiniteMFPTError("the chain starts in its absorbing state 0")
    if n_absorb > n0:
        u, _ = model.rate_arrays(np.arange(n0, n_absorb, dtype=float), V)
        if np.any(u <= 0):
            raise InfiniteMFPTError("a vanishing birth rate blocks the upward passage")
    shared = _RateTable(model, V, max(n0, n_absorb) + 64)
    threads = threads or default_threads()
    start = time.monotonic()
    bounds = [(a, min(a + chunk, replicas)) for a in range(0, replicas, chunk)]

    def work(bound):
        if time_budget is not None and time.monotonic() - start > time_budget:
            return None
        first, last = bound
        out = np.empty(last - first)
        table = shared
        while True:
            status = _hitting_kernel(int(n0), int(n_absorb), np.uint32(seed), first, last,
                                     np.uint64(max_events), out, table.array)
            if status != _TABLE_EXCEEDED:
                break
            if table is shared:
                table = _RateTable(model, V, shared.array.shape[0])
            table.grow()
        _raise_status(status, f"n0={n0}, target={n_absorb}, seed={seed}")
        return out

    if threads == 1:
        results = [work(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, bounds))
    stats = (0, 0.0, 0.0)
    for out in results:
        if out is not None:
            stats = _merge(stats, (len(out), float(out.mean()), float(((out - out.mean()) ** 2).sum())))
    count, mean, m2 = stats
    if count < 2:
        return HittingTimeEstimate(mean if count else math.nan, math.nan, count, seed, False)
    stderr = math.sqrt(m2 / (count - 1) / count)
    return HittingTimeEstimate(mean, stderr, count, seed, count == replicas)


def occupancy(model: BirthDeathModel, V: float, n0: int, n_events: int, seed: int = 0,
              n_max: int | None = None) -> np.ndarray:
    """Time-weighted normalized state histogram over ``n_events`` events.

    States above ``n_max`` (default ``4 V``) are visited but not recorded.
    """
    seed = _check_seed(seed)
    n_max = int(4 * V) if n_max is None else int(n_max)
    table = _RateTable(model, V, max(n_max, n0) + 1)
    while True:
        hist, status = _occupancy_kernel(int(n0), int(n_events), np.uint32(seed), n_max,
                                         table.array)
        if status != _TABLE_EXCEEDED:
            break
        table.grow()
    _raise_status(status, f"n0={n0}, seed={seed}")
    if status == _ABSORBED and hist.sum() == 0:
        raise DomainError("the chain is absorbed before any holding time accrues")
    return hist / hist.sum()
