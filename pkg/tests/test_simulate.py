import math

import numpy as np
import pytest

from birthdeath.errors import DomainError, InfiniteMFPTError
from birthdeath.exact import mfpt_exact_left, mfpt_exact_right, stationary_distribution
from birthdeath.model import BirthDeathModel, RateTerm, keizer, poisson, schlogl
from birthdeath.simulate import (HittingTimeEstimate, default_threads, mc_mfpt, occupancy,
                                 ssa_trajectory, threefry2x32)

HAND = BirthDeathModel((RateTerm(1, 0, 0),), (RateTerm(1, 0, 0),))
PURE_BIRTH = BirthDeathModel((RateTerm(1, 0),), ())
FROZEN = BirthDeathModel((), ())


@pytest.mark.parametrize("counter,key,expected", [
    ((0, 0), (0, 0), (0x6B200159, 0x99BA4EFE)),
    ((0xFFFFFFFF, 0xFFFFFFFF), (0xFFFFFFFF, 0xFFFFFFFF), (0x1CB996FC, 0xBB002BE7)),
    ((0x243F6A88, 0x85A308D3), (0x13198A2E, 0x03707344), (0xC4923A9C, 0x483DF7A0)),
])
def test_threefry_known_answers(counter, key, expected):
    assert tuple(int(v) for v in threefry2x32(*counter, *key)) == expected


def test_trajectory_shape_and_determinism():
    a = ssa_trajectory(poisson(), 50, 10, t_max=5.0, seed=7)
    b = ssa_trajectory(poisson(), 50, 10, t_max=5.0, seed=7)
    np.testing.assert_array_equal(a.times, b.times)
    np.testing.assert_array_equal(a.states, b.states)
    path = np.concatenate([[10], a.states])
    assert np.all(np.abs(np.diff(path)) == 1)
    assert np.all(np.diff(np.concatenate([[0.0], a.times])) > 0)
    assert a.times[-1] <= 5.0 and not a.absorbed
    c = ssa_trajectory(poisson(), 50, 10, t_max=5.0, seed=8)
    assert not np.array_equal(a.states[:20], c.states[:20])


def test_small_buffer_reproduces_same_path():
    a = ssa_trajectory(poisson(), 50, 10, t_max=20.0, seed=3)
    b = ssa_trajectory(poisson(), 50, 10, t_max=20.0, seed=3, capacity=16)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.times, b.times)


def test_frozen_model_absorbs_immediately():
    traj = ssa_trajectory(FROZEN, 1.0, 4, t_max=10.0)
    assert traj.absorbed and len(traj) == 0


def test_keizer_extinction_flagged():
    traj = ssa_trajectory(keizer(k1=0.5), 10, 3, t_max=1e4, seed=1)
    assert traj.absorbed and traj.states[-1] == 0


def test_hit_state_stops_on_target():
    traj = ssa_trajectory(HAND, 1.0, 0, hit_state=2, seed=11)
    assert traj.states[-1] == 2 and np.all(traj.states[:-1] < 2)


def test_stop_condition_required():
    with pytest.raises(DomainError):
        ssa_trajectory(HAND, 1.0, 0)
    with pytest.raises(DomainError):
        ssa_trajectory(HAND, 1.0, 0, t_max=1.0, hit_state=2)


def test_seed_range():
    with pytest.raises(DomainError):
        ssa_trajectory(HAND, 1.0, 0, t_max=1.0, seed=2 ** 32)
    with pytest.raises(DomainError):
        mc_mfpt(HAND, 1.0, 0, 2, 10, seed=-1)


def test_pure_birth_counts_are_poisson():
    horizon, replicas = 3.0, 10_000
    counts = np.array([len(ssa_trajectory(PURE_BIRTH, 1.0, 0, t_max=horizon, seed=5, replica=r))
                       for r in range(replicas)])
    stderr = counts.std(ddof=1) / math.sqrt(replicas)
    assert abs(counts.mean() - horizon) < 3 * stderr
    assert counts.var() == pytest.approx(horizon, rel=0.05)


def test_occupancy_matches_stationary_law():
    hist = occupancy(poisson(1, 2), 100, 50, 1_000_000, seed=2)
    exact = stationary_distribution(poisson(1, 2), 100).p
    size = min(len(hist), len(exact))
    tv = 0.5 * (np.abs(hist[:size] - exact[:size]).sum() + exact[size:].sum() + hist[size:].sum())
    assert tv < 0.02


def test_hand_model_mean():
    est = mc_mfpt(HAND, 1.0, 0, 2, 100_000, seed=1)
    assert isinstance(est, HittingTimeEstimate) and est.complete
    assert abs(est.mean - 3.0) < 3 * est.stderr
    assert est.to_dict()["replicas"] == 100_000


def test_schlogl_barrier_crossing():
    model, V = schlogl(), 60
    exact = mfpt_exact_right(model, V, 24, 78)
    est = mc_mfpt(model, V, 24, 78, 10_000, seed=4)
    assert abs(est.mean - exact) < 3 * est.stderr


def test_start_on_target():
    est = mc_mfpt(HAND, 1.0, 2, 2, 10)
    assert (est.mean, est.stderr) == (0.0, 0.0)


def test_results_do_not_depend_on_scheduling():
    runs = [mc_mfpt(schlogl(), 40, 16, 24, 5000, seed=9, threads=t, chunk=c)
            for t, c in ((1, 5000), (4, 333), (2, 64))]
    assert runs[0].mean == pytest.approx(runs[1].mean, rel=1e-12)
    assert runs[0].mean == pytest.approx(runs[2].mean, rel=1e-12)


def test_replica_streams_match_single_trajectories():
    est = mc_mfpt(HAND, 1.0, 0, 2, 64, seed=21, chunk=7, threads=3)
    times = [ssa_trajectory(HAND, 1.0, 0, hit_state=2, seed=21, replica=r).times[-1]
             for r in range(64)]
    assert est.mean == pytest.approx(np.mean(times), rel=1e-12)


def test_downward_passage():
    # the top wall sits far beyond any state the chain reaches
    exact = mfpt_exact_left(poisson(1, 2), 100, 70, 45, 400)
    est = mc_mfpt(poisson(1, 2), 100, 70, 45, 20_000, seed=3)
    assert abs(est.mean - exact) < 3 * est.stderr


def test_blocked_passage_raises():
    with pytest.raises(InfiniteMFPTError):
        mc_mfpt(keizer(), 10, 0, 5, 10)
    blocked = BirthDeathModel((RateTerm(1, 0), RateTerm(-1 / 3, 1)), (RateTerm(1, 1),))
    with pytest.raises(InfiniteMFPTError):
        mc_mfpt(blocked, 3, 0, 10, 10)  # u_9 = 0


def test_budget_gives_partial_estimate():
    est = mc_mfpt(schlogl(), 60, 24, 78, 200_000, seed=0, threads=1, chunk=256,
                  time_budget=0.0)
    assert not est.complete
    assert est.replicas < 200_000


def test_event_cap():
    with pytest.raises(InfiniteMFPTError):
        mc_mfpt(schlogl(), 200, 80, 260, 4, max_events=1000)


def test_thread_env_override(monkeypatch):
    monkeypatch.setenv("DGP_THREADS", "3")
    assert default_threads() == 3
