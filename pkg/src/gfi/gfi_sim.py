"""Exact event-driven simulation of the process on recursive trees.

Every active cluster carries its recursive tree (0-based parent array), the
birth time of each vertex and a genealogical label. The label is a word over
{'1', '2'}: splitting cluster ``w`` produces ``w + '1'`` (the part holding
the root) and ``w + '2'`` (the detached subtree). ``origin`` records which
initial cluster a label descends from.

Events are drawn category first (total growth, isolation and fragmentation
rates are integer multiples of the rates), then a size class by an integer
weighted scan, then a cluster uniformly inside that class.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from ._random import RngLike, as_stream, replica_rng
from .params import Params, ValidationError
from .rrt import RecursiveTree, _split_lists, sample_uniform_rrt
from .size_process import DEFAULT_CLUSTER_CAP, ProcessStopped

__all__ = [
    "Params", "ClusterState", "ForestState", "EventRecord", "Trajectory", "ProcessStopped",
    "initial_forest", "next_event", "simulate", "observe_sizes", "observe_tree_classes",
    "write_events_jsonl", "write_snapshots_csv", "replica_rng",
]


class ClusterState:
    """One cluster: tree, vertex birth times, label and activity flag."""

    __slots__ = ("par", "births", "label", "origin", "active", "isolated_at")

    def __init__(self, par: list, births: list, label: str = "", origin: int = 0,
                 active: bool = True, isolated_at: Optional[float] = None):
        self.par = par
        self.births = births
        self.label = label
        self.origin = origin
        self.active = active
        self.isolated_at = isolated_at

    @property
    def size(self) -> int:
        return len(self.par)

    @property
    def tree(self) -> RecursiveTree:
        return RecursiveTree.from_zero_based(self.par)

    @property
    def vertex_birth_times(self) -> tuple:
        return tuple(self.births)

    def copy(self) -> "ClusterState":
        return ClusterState(list(self.par), list(self.births), self.label, self.origin,
                            self.active, self.isolated_at)

    def to_dict(self) -> dict:
        return {"label": self.label, "origin": self.origin, "active": self.active,
                "parents": [p + 1 for p in self.par[1:]], "births": list(self.births),
                "isolated_at": self.isolated_at}

    def __repr__(self) -> str:
        state = "active" if self.active else "inactive"
        return f"ClusterState(label={self.label!r}, origin={self.origin}, size={self.size}, {state})"


class ForestState:
    """Active clusters bucketed by size, plus the list of inactive clusters."""

    __slots__ = ("time", "buckets", "inactive_clusters", "vertices", "clusters")

    def __init__(self, time: float = 0.0, active: Iterable[ClusterState] = (),
                 inactive: Iterable[ClusterState] = ()):
        self.time = float(time)
        self.buckets: dict = {}
        self.inactive_clusters = list(inactive)
        self.vertices = 0
        self.clusters = 0
        for cl in active:
            if not cl.active:
                raise ValidationError("inactive cluster passed as active")
            self.buckets.setdefault(cl.size, []).append(cl)
            self.vertices += cl.size
            self.clusters += 1

    @property
    def active_clusters(self) -> list:
        return [cl for n in sorted(self.buckets) for cl in self.buckets[n]]

    @property
    def extinct(self) -> bool:
        return self.clusters == 0

    def copy(self) -> "ForestState":
        return ForestState(self.time, [cl.copy() for cl in self.active_clusters],
                           [cl.copy() for cl in self.inactive_clusters])

    def size_histograms(self) -> tuple[dict, dict]:
        active = {n: len(b) for n, b in self.buckets.items() if b}
        inactive: dict = {}
        for cl in self.inactive_clusters:
            inactive[cl.size] = inactive.get(cl.size, 0) + 1
        return active, inactive


def initial_forest(sizes: Sequence[int], rng: RngLike = None) -> ForestState:
    """Clusters of the given sizes, each an independent uniform recursive tree.

    Initial vertices get placeholder birth times (i - n)/n, i = 1..n, which
    are increasing and end at 0.
    """
    stream = as_stream(rng)
    clusters = []
    for origin, n in enumerate(sizes):
        if int(n) != n or n < 1:
            raise ValidationError(f"initial cluster sizes must be positive integers, got {n}")
        n = int(n)
        par = sample_uniform_rrt(n, stream).zero_based()
        births = [(i - n) / n for i in range(1, n + 1)]
        clusters.append(ClusterState(par, births, "", origin))
    return ForestState(0.0, clusters)


@dataclass
class EventRecord:
    time: float
    kind: str
    label: str
    origin: int
    size: int
    vertex: Optional[int] = None  # new vertex's parent (growth) or cut edge child (split), 1-based
    children: tuple = ()
    child_sizes: tuple = ()

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind, "label": self.label, "origin": self.origin,
                "size": self.size, "vertex": self.vertex, "children": list(self.children),
                "child_sizes": list(self.child_sizes)}


def _run(state: ForestState, params: Params, stream, horizon: float, observe: Sequence[float],
         on_observe: Optional[Callable], stop: Optional[Callable], cluster_cap: int,
         event_cap: Optional[int], events: Optional[list]) -> tuple[str, int]:
    """Mutate ``state`` in place; returns (reason, number of events)."""
    params.require_simulable()
    beta, theta, gamma = params.rates
    modified = params.modified
    buckets = state.buckets
    inactive = state.inactive_clusters
    rand = stream.random
    log = math.log
    V, C, t = state.vertices, state.clusters, state.time
    obs = list(observe)
    oi, n_obs = 0, len(obs)
    n_events = 0
    max_events = math.inf if event_cap is None else event_cap
    reason = "horizon"
    while True:
        E = V - C
        g_rate = beta * V
        i_rate = theta * (E if modified else V)
        R = g_rate + i_rate + gamma * E
        t_next = t - log(1.0 - rand()) / R if C > 0 and R > 0 else math.inf
        while oi < n_obs and obs[oi] < t_next and obs[oi] <= horizon:
            state.time, state.vertices, state.clusters = obs[oi], V, C
            on_observe(state)
            oi += 1
        if t_next > horizon:
            if C == 0:
                reason = "extinct"
            else:
                t = horizon
            break
        if C == 0:
            reason = "extinct"
            break
        t = t_next
        x = rand() * R
        if x < g_rate:
            kind = 0
            edge_weight = False
        elif x < g_rate + i_rate:
            kind = 1
            edge_weight = modified
        else:
            kind = 2
            edge_weight = True
        if edge_weight:
            k = int(rand() * E)
            for n, bucket in buckets.items():
                k -= (n - 1) * len(bucket)
                if k < 0:
                    break
        else:
            k = int(rand() * V)
            for n, bucket in buckets.items():
                k -= n * len(bucket)
                if k < 0:
                    break
        m = len(bucket)
        idx = int(rand() * m)
        if idx >= m:
            idx = m - 1
        cl = bucket[idx]
        last = bucket.pop()
        if idx < m - 1:
            bucket[idx] = last
        elif not bucket:
            del buckets[n]
        if kind == 0:
            v = int(rand() * n)
            if v >= n:
                v = n - 1
            cl.par.append(v)
            cl.births.append(t)
            nb = buckets.get(n + 1)
            if nb is None:
                buckets[n + 1] = [cl]
            else:
                nb.append(cl)
            V += 1
            if events is not None:
                events.append(EventRecord(t, "growth", cl.label, cl.origin, n, v + 1))
        elif kind == 1:
            cl.active = False
            cl.isolated_at = t
            inactive.append(cl)
            V -= n
            C -= 1
            if events is not None:
                events.append(EventRecord(t, "isolation", cl.label, cl.origin, n))
        else:
            child = 1 + int(rand() * (n - 1))
            if child >= n:
                child = n - 1
            root_idx, det_idx, root_par, det_par = _split_lists(cl.par, child)
            births = cl.births
            a = ClusterState(root_par, [births[i] for i in root_idx], cl.label + "1", cl.origin)
            b = ClusterState(det_par, [births[i] for i in det_idx], cl.label + "2", cl.origin)
            for part in (a, b):
                nb = buckets.get(part.size)
                if nb is None:
                    buckets[part.size] = [part]
                else:
                    nb.append(part)
            C += 1
            if events is not None:
                events.append(EventRecord(t, "fragmentation", cl.label, cl.origin, n, child + 1,
                                          (a.label, b.label), (a.size, b.size)))
        n_events += 1
        if C > cluster_cap or n_events >= max_events:
            reason = "censored"
            break
        if stop is not None:
            state.time, state.vertices, state.clusters = t, V, C
            if stop(state):
                reason = "stopped"
                break
    state.time, state.vertices, state.clusters = t, V, C
    return reason, n_events


def next_event(state: ForestState, params: Params, rng: RngLike = None,
               inplace: bool = False) -> tuple[ForestState, EventRecord]:
    """Apply one event; the input is left untouched unless ``inplace``."""
    if state.extinct:
        raise ProcessStopped("no active cluster: the process has stopped")
    new = state if inplace else state.copy()
    events: list = []
    _run(new, params, as_stream(rng), math.inf, (), None, None, DEFAULT_CLUSTER_CAP, 1, events)
    return new, events[0]


@dataclass
class Trajectory:
    snapshots: list          # (time, observation) pairs
    events: list
    extinction_time: Optional[float]
    censored: bool
    final: ForestState
    n_events: int
    reason: str
    initial_sizes: tuple = field(default_factory=tuple)


def observe_sizes(state: ForestState) -> dict:
    active, inactive = state.size_histograms()
    return {"active": active, "inactive": inactive}


def observe_tree_classes(state: ForestState, K: int) -> dict:
    """Counts of recursive-tree classes of size <= K in each pool."""
    active: dict = {}
    for n, bucket in state.buckets.items():
        if n <= K:
            for cl in bucket:
                tree = cl.tree
                active[tree] = active.get(tree, 0) + 1
    inactive: dict = {}
    for cl in state.inactive_clusters:
        if cl.size <= K:
            tree = cl.tree
            inactive[tree] = inactive.get(tree, 0) + 1
    return {"active": active, "inactive": inactive}


def simulate(params: Params, initial, horizon: float = math.inf, rng: RngLike = None,
             observe_times: Iterable[float] = (), observer: Callable = observe_sizes,
             stop: Optional[Callable] = None, cluster_cap: int = DEFAULT_CLUSTER_CAP,
             event_cap: Optional[int] = None, record_events: bool = True) -> Trajectory:
    """Simulate from ``initial`` (a ForestState or a list of initial sizes).

    ``observer(state)`` is called at each observation time; ``stop(state)``
    after every event. Runs end at the horizon, on extinction, when ``stop``
    returns true or when a cap is hit (the run is then flagged censored).
    """
    stream = as_stream(rng)
    if isinstance(initial, ForestState):
        state = initial.copy()
    else:
        state = initial_forest(list(initial), stream)
    if not math.isfinite(horizon) and stop is None and event_cap is None:
        raise ValidationError("need a finite horizon, a stop predicate or an event cap")
    times = sorted(float(t) for t in observe_times)
    if times and times[0] < state.time:
        raise ValidationError("observation times precede the initial time")
    initial_sizes = tuple(cl.size for cl in state.active_clusters)
    snapshots: list = []
    events: Optional[list] = [] if record_events else None
    reason, n = _run(state, params, stream, horizon, times,
                     lambda s: snapshots.append((s.time, observer(s))), stop, cluster_cap,
                     event_cap, events)
    return Trajectory(
        snapshots=snapshots,
        events=events or [],
        extinction_time=state.time if reason == "extinct" else None,
        censored=reason == "censored",
        final=state,
        n_events=n,
        reason=reason,
        initial_sizes=initial_sizes,
    )


def write_events_jsonl(events: Sequence[EventRecord], handle) -> None:
    for ev in events:
        handle.write(json.dumps(ev.to_dict(), separators=(",", ":")) + "\n")


def write_snapshots_csv(snapshots: Sequence, handle) -> None:
    """Rows (time, size, count, pool) from ``observe_sizes`` snapshots."""
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(["time", "size", "count", "pool"])
    for t, obs in snapshots:
        for pool in ("active", "inactive"):
            hist = obs[pool]
            for n in sorted(hist):
                writer.writerow([repr(t), n, hist[n], pool])

