import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfi import spectral
from gfi.params import Params, ValidationError
from gfi.rrt import split_size_law
from gfi.size_process import SizeState, TestFunction, pair_functional, simulate, step


def test_first_event_kinds_follow_rates():
    params = Params(1.0, 0.5, 2.0)
    n = 4
    rng = np.random.default_rng(0)
    kinds = {"growth": 0, "isolation": 0, "fragmentation": 0}
    waits = []
    for _ in range(20000):
        s = step(SizeState.single(n), params, rng)
        waits.append(s.time)
        if s.inactive:
            kinds["isolation"] += 1
        elif s.active == {n + 1: 1}:
            kinds["growth"] += 1
        else:
            kinds["fragmentation"] += 1
    total = params.cluster_rate(n)
    expect = {"growth": 1.0 * n / total, "isolation": 0.5 * n / total,
              "fragmentation": 2.0 * (n - 1) / total}
    for k, p in expect.items():
        assert kinds[k] / 20000 == pytest.approx(p, abs=0.015)
    assert np.mean(waits) == pytest.approx(1 / total, rel=0.03)


def test_fragment_sizes_follow_split_law():
    params = Params(1e-9, 1e-9, 1.0)
    n = 7
    rng = np.random.default_rng(1)
    counts = np.zeros(n)
    for _ in range(30000):
        s = step(SizeState.single(n), params, rng)
        # the detached part is the one produced by the split-size sampler; tally both parts
        for m, c in s.active.items():
            counts[m] += c
    freq = counts[1:] / counts.sum()
    # either part of a split of n has size j with probability (P(j) + P(n-j)) / 2
    law = np.array([(split_size_law(n, j) + split_size_law(n, n - j)) / 2 for j in range(1, n)])
    assert np.max(np.abs(freq - law)) < 0.01


def test_modified_variant_never_isolates_singletons():
    params = Params(1.0, 5.0, 1.0, "modified-edge-isolation")
    rng = np.random.default_rng(2)
    for _ in range(500):
        assert step(SizeState.single(1), params, rng).active == {2: 1}


def test_mean_count_matches_semigroup():
    params = Params(1.0, 0.2, 1.0)
    t = 2.0
    rng = np.random.default_rng(3)
    counts = np.array([simulate(params, SizeState.single(1), t, rng, [t]).snapshots[0].n_active
                       for _ in range(8000)])
    exact = spectral.mean_active_count(spectral.build_generator(params, 256), t)
    assert abs(counts.mean() - exact) < 4 * counts.std() / math.sqrt(len(counts))


def test_growth_only_is_yule():
    # a Yule process from one vertex has geometric size with mean e^{beta t}
    params = Params.growth_only(1.0)
    rng = np.random.default_rng(4)
    sizes = np.array([simulate(params, SizeState.single(1), 1.5, rng, [1.5]).snapshots[0]
                      .active_vertices for _ in range(5000)])
    assert sizes.mean() == pytest.approx(math.exp(1.5), rel=0.05)
    p = math.exp(-1.5)
    assert np.mean(sizes == 1) == pytest.approx(p, abs=0.015)


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6), st.integers(1, 6))
def test_vertex_conservation(seed, n0):
    params = Params(1.0, 0.3, 1.0)
    traj = simulate(params, SizeState.single(n0), 2.0, np.random.default_rng(seed),
                    record_events=True)
    growths = sum(e["kind"] == "growth" for e in traj.events)
    final = traj.final
    inactive_vertices = sum(n * c for n, c in final.inactive.items())
    assert final.active_vertices + inactive_vertices == n0 + growths
    isolations = sum(e["kind"] == "isolation" for e in traj.events)
    assert final.n_inactive == isolations
    splits = sum(e["kind"] == "fragmentation" for e in traj.events)
    assert final.n_active + final.n_inactive == 1 + splits


def test_extinction_time_recorded():
    params = Params(0.2, 2.0, 0.5)
    traj = simulate(params, SizeState.single(1), 100.0, np.random.default_rng(5))
    assert traj.reason == "extinct"
    assert traj.extinction_time is not None and traj.extinction_time < 100.0
    assert traj.final.time == traj.extinction_time


def test_snapshot_at_initial_time_is_initial_state():
    params = Params(1.0, 0.3, 1.0)
    init = SizeState(0.0, {3: 2})
    traj = simulate(params, init, 1.0, np.random.default_rng(6), [0.0, 1.0])
    assert traj.snapshots[0].active == {3: 2}


def test_same_seed_same_path():
    params = Params(1.0, 0.1, 1.0)
    a = simulate(params, SizeState.single(1), 4.0, np.random.default_rng(7), [1, 2, 4])
    b = simulate(params, SizeState.single(1), 4.0, np.random.default_rng(7), [1, 2, 4])
    assert [s.to_dict() for s in a.snapshots] == [s.to_dict() for s in b.snapshots]


def test_cluster_cap_censors():
    params = Params(2.0, 0.01, 2.0)
    traj = simulate(params, SizeState.single(1), 50.0, np.random.default_rng(8), cluster_cap=50)
    assert traj.censored and traj.reason == "censored"


def test_needs_a_stopping_rule():
    with pytest.raises(ValidationError):
        simulate(Params(1, 1, 1), SizeState.single(1))


def test_test_function_growth_bound():
    f = TestFunction.monomial(2.0)
    assert f(3) == 9.0 and f(100) == 10000.0
    with pytest.raises(ValidationError):
        TestFunction(0.0, (1.0, 5.0), lambda n: 0.0)


def test_pair_functional():
    state = SizeState(0.0, {1: 2, 3: 1}, {2: 4})
    assert pair_functional(state, lambda n: n) == 5
    assert pair_functional(state, lambda n: 1.0, "inactive") == 4
