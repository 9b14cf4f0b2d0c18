"""Size-resolved simulation of active and inactive cluster counts.

By the splitting property a cluster is a uniform recursive tree given its
size, so the process on size histograms is itself Markov: a size-n cluster
grows at rate beta*n, is isolated at rate theta*n (theta*(n-1) in the
modified variant) and splits into (n-j, j) at rate gamma*n/(j(j+1)).

Events are drawn by category first (total growth, isolation and
fragmentation rates are integer multiples of the rates) and then by size
class, scanning the histogram with integer weights.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from ._random import RngLike, as_stream
from .params import Params, ValidationError
from .rrt import sample_split_size

DEFAULT_CLUSTER_CAP = 10 ** 6


class ProcessStopped(RuntimeError):
    """Raised when an event is requested from an extinct state."""


def _clean_hist(hist: Optional[Mapping]) -> dict:
    out = {}
    for n, c in (hist or {}).items():
        n, c = int(n), int(c)
        if n < 1:
            raise ValidationError(f"cluster sizes must be positive, got {n}")
        if c < 0:
            raise ValidationError(f"counts must be nonnegative, got {c} at size {n}")
        if c:
            out[n] = c
    return out


@dataclass(frozen=True)
class SizeState:
    """Counts of active and inactive clusters by size at a given time."""

    time: float = 0.0
    active: dict = field(default_factory=dict)
    inactive: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "active", _clean_hist(self.active))
        object.__setattr__(self, "inactive", _clean_hist(self.inactive))

    @classmethod
    def single(cls, n: int = 1) -> "SizeState":
        return cls(0.0, {n: 1}, {})

    @property
    def n_active(self) -> int:
        return sum(self.active.values())

    @property
    def n_inactive(self) -> int:
        return sum(self.inactive.values())

    @property
    def active_vertices(self) -> int:
        return sum(n * c for n, c in self.active.items())

    @property
    def extinct(self) -> bool:
        return not self.active

    def to_dict(self) -> dict:
        return {"time": self.time,
                "active": {str(n): c for n, c in sorted(self.active.items())},
                "inactive": {str(n): c for n, c in sorted(self.inactive.items())}}


@dataclass(frozen=True)
class TestFunction:
    """Function on cluster sizes with polynomial growth of exponent ``p``.

    Explicit values cover 1..len(values); larger sizes use ``closed_form``.
    """

    __test__ = False  # not a pytest class

    p: float
    values: tuple
    closed_form: Callable[[int], float]
    c: float = 1.0
    name: str = ""

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        for n, v in enumerate(vals, start=1):
            if abs(v) > self.c * n ** self.p * (1 + 1e-12):
                raise ValidationError(
                    f"|f({n})| = {abs(v):g} exceeds the growth bound {self.c:g} * n^{self.p:g}")

    def __call__(self, n: int) -> float:
        if n <= len(self.values):
            return self.values[n - 1]
        return float(self.closed_form(n))

    def as_array(self, N: int) -> np.ndarray:
        return np.array([self(n) for n in range(1, N + 1)], dtype=float)

    @classmethod
    def from_callable(cls, fn: Callable[[int], float], p: float, n_eval: int = 64,
                      c: float = 1.0, name: str = "") -> "TestFunction":
        return cls(p, tuple(fn(n) for n in range(1, n_eval + 1)), fn, c, name)

    @classmethod
    def monomial(cls, p: float, n_eval: int = 64) -> "TestFunction":
        return cls.from_callable(lambda n: float(n) ** p, p, n_eval, 1.0, f"x^{p:g}")

    @classmethod
    def indicator(cls, m: int, n_eval: int = 64) -> "TestFunction":
        return cls.from_callable(lambda n: 1.0 if n == m else 0.0, 0.0, max(n_eval, m), 1.0,
                                 f"1_{m}")

    @classmethod
    def constant(cls, value: float = 1.0, n_eval: int = 64) -> "TestFunction":
        return cls.from_callable(lambda n: value, 0.0, n_eval, abs(value), f"const {value:g}")

    @classmethod
    def monomial_tail(cls, p: float, K: int, n_eval: int = 64) -> "TestFunction":
        """n^p restricted to sizes above K."""
        return cls.from_callable(lambda n: float(n) ** p if n > K else 0.0, p, n_eval, 1.0,
                                 f"x^{p:g} on n>{K}")


def pair_functional(state, f, pool: str = "active") -> float:
    """<X_t, f> or <Y_t, f>; ``f`` is a TestFunction or any callable on sizes."""
    if pool not in ("active", "inactive"):
        raise ValidationError(f"pool must be 'active' or 'inactive', got {pool!r}")
    hist = state.active if pool == "active" else state.inactive
    return float(sum(c * f(n) for n, c in hist.items()))


class SizeEngine:
    """Mutable size-process state used by the event loop.

    Exposes ``time``, ``active`` and ``inactive`` so that stop predicates and
    observers can read it without copying.
    """

    def __init__(self, params: Params, state: SizeState):
        params.require_simulable()
        self.params = params
        self.time = float(state.time)
        self.active = dict(state.active)
        self.inactive = dict(state.inactive)
        self.vertices = sum(n * c for n, c in self.active.items())
        self.clusters = sum(self.active.values())
        self.events = 0

    def snapshot(self, at: Optional[float] = None) -> SizeState:
        s = object.__new__(SizeState)
        object.__setattr__(s, "time", self.time if at is None else at)
        object.__setattr__(s, "active", dict(self.active))
        object.__setattr__(s, "inactive", dict(self.inactive))
        return s

    def total_rate(self) -> float:
        beta, theta, gamma = self.params.rates
        edges = self.vertices - self.clusters
        iso = edges if self.params.modified else self.vertices
        return beta * self.vertices + theta * iso + gamma * edges

    def run(self, stream, horizon: float = math.inf, observe: Sequence[float] = (),
            on_observe: Optional[Callable] = None, stop: Optional[Callable] = None,
            cluster_cap: int = DEFAULT_CLUSTER_CAP, event_cap: Optional[int] = None,
            on_event: Optional[Callable] = None) -> str:
        """Advance until the horizon, extinction, ``stop(self)`` or a cap.

        Returns the reason: ``horizon``, ``extinct``, ``stopped`` or ``censored``.
        """
        beta, theta, gamma = self.params.rates
        modified = self.params.modified
        active = self.active
        inactive = self.inactive
        rand = stream.random
        log = math.log
        obs = list(observe)
        oi = 0
        n_obs = len(obs)
        V = self.vertices
        C = self.clusters
        t = self.time
        events = self.events
        max_events = math.inf if event_cap is None else event_cap
        reason = "horizon"
        while True:
            E = V - C
            iso_w = E if modified else V
            g_rate = beta * V
            i_rate = theta * iso_w
            R = g_rate + i_rate + gamma * E
            if C == 0 or R <= 0:
                t_next = math.inf
            else:
                t_next = t - log(1.0 - rand()) / R
            while oi < n_obs and obs[oi] < t_next and obs[oi] <= horizon:
                self.time, self.vertices, self.clusters, self.events = obs[oi], V, C, events
                on_observe(self)
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
                k = int(rand() * V)
                for n, c in active.items():
                    k -= n * c
                    if k < 0:
                        break
            elif x < g_rate + i_rate:
                kind = 1
                if modified:
                    k = int(rand() * E)
                    for n, c in active.items():
                        k -= (n - 1) * c
                        if k < 0:
                            break
                else:
                    k = int(rand() * V)
                    for n, c in active.items():
                        k -= n * c
                        if k < 0:
                            break
            else:
                kind = 2
                k = int(rand() * E)
                for n, c in active.items():
                    k -= (n - 1) * c
                    if k < 0:
                        break
            c = active[n] - 1
            if c:
                active[n] = c
            else:
                del active[n]
            if kind == 0:
                active[n + 1] = active.get(n + 1, 0) + 1
                V += 1
                j = 0
            elif kind == 1:
                inactive[n] = inactive.get(n, 0) + 1
                V -= n
                C -= 1
                j = 0
            else:
                j = sample_split_size(n, 1.0 - rand())
                active[n - j] = active.get(n - j, 0) + 1
                active[j] = active.get(j, 0) + 1
                C += 1
            events += 1
            if on_event is not None:
                on_event(t, kind, n, j)
            if C > cluster_cap or events >= max_events:
                reason = "censored"
                break
            if stop is not None:
                self.time, self.vertices, self.clusters, self.events = t, V, C, events
                if stop(self):
                    reason = "stopped"
                    break
        self.time, self.vertices, self.clusters, self.events = t, V, C, events
        return reason


EVENT_KINDS = ("growth", "isolation", "fragmentation")


def step(state: SizeState, params: Params, rng: RngLike = None) -> SizeState:
    """One event of the size process (the returned state carries the event time)."""
    if state.extinct:
        raise ProcessStopped("no active cluster: the process has stopped")
    engine = SizeEngine(params, state)
    engine.run(as_stream(rng), event_cap=1)
    return engine.snapshot()


@dataclass
class SizeTrajectory:
    snapshots: list
    events: list
    extinction_time: Optional[float]
    censored: bool
    final: SizeState
    n_events: int
    reason: str


def simulate(params: Params, initial: SizeState, horizon: float = math.inf,
             rng: RngLike = None, observe_times: Iterable[float] = (),
             stop: Optional[Callable] = None, cluster_cap: int = DEFAULT_CLUSTER_CAP,
             event_cap: Optional[int] = None, record_events: bool = False) -> SizeTrajectory:
    """Run the size process from ``initial`` up to ``horizon``.

    Snapshots are taken at each requested observation time (a time equal to
    the initial time reproduces the initial state). ``stop`` receives the live
    engine after every event. Either a finite horizon, a stop predicate or an
    event cap is required.
    """
    if not isinstance(initial, SizeState):
        initial = SizeState(0.0, initial)
    if not math.isfinite(horizon) and stop is None and event_cap is None:
        raise ValidationError("need a finite horizon, a stop predicate or an event cap")
    times = sorted(float(t) for t in observe_times)
    if times and times[0] < initial.time:
        raise ValidationError("observation times precede the initial time")
    engine = SizeEngine(params, initial)
    snapshots: list = []
    events: list = []
    on_event = None
    if record_events:
        def on_event(t, kind, n, j):
            events.append({"time": t, "kind": EVENT_KINDS[kind], "size": n,
                           "detached": j if kind == 2 else None})
    reason = engine.run(as_stream(rng), horizon, times, lambda e: snapshots.append(e.snapshot()),
                        stop, cluster_cap, event_cap, on_event)
    extinct = engine.clusters == 0
    return SizeTrajectory(
        snapshots=snapshots,
        events=events,
        extinction_time=engine.time if extinct and reason == "extinct" else None,
        censored=reason == "censored",
        final=engine.snapshot(),
        n_events=engine.events,
        reason=reason,
    )


def write_snapshots_csv(snapshots: Sequence[SizeState], handle) -> None:
    """Rows (time, pool, size, count) in time, pool, size order."""
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(["time", "pool", "size", "count"])
    for snap in snapshots:
        for pool, hist in (("active", snap.active), ("inactive", snap.inactive)):
            for n in sorted(hist):
                writer.writerow([repr(snap.time), pool, n, hist[n]])
