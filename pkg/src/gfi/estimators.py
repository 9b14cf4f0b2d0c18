"""Monte Carlo estimators compared with the spectral predictions.

Ensembles are built replica by replica from counter-derived seeds, so every
estimator is a deterministic function of (params, master seed, replica
count). Confidence intervals are percentile bootstraps over replicas.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._random import UniformStream, replica_rng
from ._stats import bootstrap_ci, chi_square_gof, grouped_jackknife, two_sample_chi_square
from .gfi_sim import initial_forest, observe_sizes, simulate as simulate_tree
from .params import Params, ValidationError, param_hash
from .rrt import RecursiveTree, enumerate_classes
from .size_process import DEFAULT_CLUSTER_CAP, SizeEngine, SizeState
from .spectral import PerronTriple, size_biased

FIDELITIES = ("size", "tree")
DEFAULT_LEVEL = 0.99


class EstimationError(RuntimeError):
    """The requested estimate is undefined for this ensemble."""


@dataclass
class CheckReport:
    """Outcome of one statistical check, serialisable as a JSON report."""

    name: str
    statistic: float
    threshold: float
    passed: bool
    ci: Optional[tuple] = None
    seeds: Optional[dict] = None
    params: Optional[dict] = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "statistic": _plain(self.statistic),
                "threshold": _plain(self.threshold), "pass": bool(self.passed),
                "ci": None if self.ci is None else [_plain(c) for c in self.ci],
                "seeds": self.seeds, "params": self.params,
                "details": {k: _plain(v) for k, v in self.details.items()}}


def _plain(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class ReplicaEnsemble:
    """Snapshots of independent replicas on a common time grid.

    ``active[r][k]`` and ``inactive[r][k]`` are size histograms of replica r
    at ``times[k]``; ``trees[r]`` maps a time in ``tree_times`` to the counts
    of tree classes of size <= ``tree_cap`` in each pool.
    """

    params: Params
    times: np.ndarray
    master_seed: int
    initial: dict
    fidelity: str
    active: list
    inactive: list
    censored: np.ndarray
    extinction_times: np.ndarray
    trees: list = field(default_factory=list)
    tree_times: tuple = ()
    tree_cap: int = 0

    @property
    def n_replicas(self) -> int:
        return len(self.active)

    @property
    def seeds(self) -> dict:
        return {"master": self.master_seed, "replicas": self.n_replicas,
                "derivation": "SeedSequence(master, spawn_key=(replica,))"}

    def time_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValidationError(f"time {t} is not on the observation grid")
        return k

    def functional(self, f: Callable[[int], float], pool: str = "active") -> np.ndarray:
        """Array (replicas, times) of <X_t, f> or <Y_t, f>."""
        data = self._pool(pool)
        out = np.zeros((self.n_replicas, len(self.times)))
        cache: dict = {}
        for r, snaps in enumerate(data):
            for k, hist in enumerate(snaps):
                s = 0.0
                for n, c in hist.items():
                    v = cache.get(n)
                    if v is None:
                        v = cache[n] = float(f(n))
                    s += c * v
                out[r, k] = s
        return out

    def counts(self, pool: str = "active") -> np.ndarray:
        data = self._pool(pool)
        return np.array([[sum(h.values()) for h in snaps] for snaps in data], dtype=float)

    def alive(self) -> np.ndarray:
        """Boolean (replicas, times): at least one active cluster."""
        return self.counts("active") > 0

    def histogram_matrix(self, t: float, pool: str = "active") -> np.ndarray:
        """Counts (replicas, sizes 1..max) at time t."""
        k = self.time_index(t)
        data = self._pool(pool)
        top = max([max(s[k], default=0) for s in data] + [1])
        mat = np.zeros((self.n_replicas, top))
        for r, snaps in enumerate(data):
            for n, c in snaps[k].items():
                mat[r, n - 1] = c
        return mat

    def _pool(self, pool: str) -> list:
        if pool == "active":
            return self.active
        if pool == "inactive":
            return self.inactive
        raise ValidationError(f"pool must be 'active' or 'inactive', got {pool!r}")

    def param_hash(self) -> str:
        return param_hash({"params": self.params.to_dict(), "times": self.times.tolist(),
                           "master": self.master_seed, "replicas": self.n_replicas,
                           "initial": {str(k): v for k, v in self.initial.items()},
                           "fidelity": self.fidelity})


def _initial_hist(initial) -> dict:
    if isinstance(initial, int):
        if initial < 1:
            raise ValidationError("initial size must be positive")
        return {initial: 1}
    hist = {int(n): int(c) for n, c in dict(initial).items() if c}
    if not hist or min(hist) < 1:
        raise ValidationError("initial histogram must contain positive sizes")
    return hist


def _run_replica(args) -> tuple:
    (params, times, master, index, initial, fidelity, tree_times, tree_cap, cluster_cap) = args
    rng = replica_rng(master, index)
    stream = UniformStream(rng)
    horizon = float(times[-1])
    active, inactive = [], []
    if fidelity == "size":
        engine = SizeEngine(params, SizeState(0.0, initial))

        def grab(e):
            active.append(dict(e.active))
            inactive.append(dict(e.inactive))

        reason = engine.run(stream, horizon, times, grab, None, cluster_cap)
        trees: dict = {}
        extinct_at = engine.time if reason == "extinct" else math.nan
    else:
        sizes = [n for n, c in sorted(initial.items()) for _ in range(c)]
        forest = initial_forest(sizes, stream)
        tree_set = set(float(t) for t in tree_times)
        trees = {}

        def observer(state):
            obs = observe_sizes(state)
            if state.time in tree_set:
                trees[state.time] = _tree_counts(state, tree_cap)
            return obs

        traj = simulate_tree(params, forest, horizon, stream, times, observer,
                             cluster_cap=cluster_cap, record_events=False)
        for _, obs in traj.snapshots:
            active.append(obs["active"])
            inactive.append(obs["inactive"])
        reason = traj.reason
        extinct_at = traj.extinction_time if traj.extinction_time is not None else math.nan
    # runs stopped by a cap miss their last snapshots; pad with empty histograms
    while len(active) < len(times):
        active.append({})
        inactive.append({})
    return active, inactive, reason == "censored", extinct_at, trees


def _tree_counts(state, cap: int) -> dict:
    out = {"active": {}, "inactive": {}}
    for n, bucket in state.buckets.items():
        if n <= cap:
            d = out["active"]
            for cl in bucket:
                key = tuple(cl.par)
                d[key] = d.get(key, 0) + 1
    d = out["inactive"]
    for cl in state.inactive_clusters:
        if cl.size <= cap:
            key = tuple(cl.par)
            d[key] = d.get(key, 0) + 1
    return out


def run_ensemble(params: Params, times: Sequence[float], n_replicas: int, master_seed: int,
                 initial=1, fidelity: str = "size", tree_times: Sequence[float] = (),
                 tree_cap: int = 6, cluster_cap: int = DEFAULT_CLUSTER_CAP,
                 workers: int = 1) -> ReplicaEnsemble:
    """Simulate ``n_replicas`` independent replicas observed on ``times``.

    Replica i uses ``SeedSequence(master_seed, spawn_key=(i,))`` whatever the
    worker count, so results do not depend on ``workers``. Tree classes are
    recorded only at ``tree_times`` (tree fidelity only). Censored replicas
    (cluster cap hit) are flagged and keep empty snapshots after the cap.
    """
    if fidelity not in FIDELITIES:
        raise ValidationError(f"fidelity must be one of {FIDELITIES}, got {fidelity!r}")
    if n_replicas < 1:
        raise ValidationError("need at least one replica")
    grid = sorted(float(t) for t in times)
    if not grid or grid[0] < 0:
        raise ValidationError("observation times must be nonnegative and non-empty")
    if tree_times and fidelity != "tree":
        raise ValidationError("tree classes need tree fidelity")
    missing = [t for t in tree_times if float(t) not in grid]
    if missing:
        raise ValidationError(f"tree times {missing} are not on the observation grid")
    params.require_simulable()
    init = _initial_hist(initial)
    jobs = [(params, grid, master_seed, i, init, fidelity, tuple(tree_times), tree_cap,
             cluster_cap) for i in range(n_replicas)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replica, jobs, chunksize=max(1, n_replicas // (8 * workers))))
    else:
        results = [_run_replica(job) for job in jobs]
    return ReplicaEnsemble(
        params=params, times=np.array(grid), master_seed=master_seed, initial=init,
        fidelity=fidelity,
        active=[r[0] for r in results], inactive=[r[1] for r in results],
        censored=np.array([r[2] for r in results], dtype=bool),
        extinction_times=np.array([r[3] for r in results], dtype=float),
        trees=[r[4] for r in results], tree_times=tuple(float(t) for t in tree_times),
        tree_cap=tree_cap,
    )


# ---------------------------------------------------------------------------
# Malthusian exponent


@dataclass
class LambdaEstimate:
    lam: float
    se: float
    window: tuple
    observable: str
    n_points: int


OBSERVABLES = ("clusters", "vertices", "isolations")


def mc_lambda(ensemble: ReplicaEnsemble, window: Optional[tuple] = None,
              observable: str = "clusters", groups: int = 50) -> LambdaEstimate:
    """Slope of log mean observable against time, with a grouped jackknife error.

    ``clusters`` is <X_t, 1>, ``vertices`` is <X_t, [x]>, and ``isolations``
    uses the mean number of isolations in each grid interval (the increments
    of |Y_t|), which decays at the Malthusian rate in the subcritical phase
    where |Y_t| itself converges.
    """
    if observable not in OBSERVABLES:
        raise ValidationError(f"observable must be one of {OBSERVABLES}")
    times = ensemble.times
    if observable == "clusters":
        data = ensemble.counts("active")
        t_pts = times
    elif observable == "vertices":
        data = ensemble.functional(lambda n: n, "active")
        t_pts = times
    else:
        inactive = ensemble.counts("inactive")
        data = np.diff(inactive, axis=1)
        t_pts = times[:-1]
    lo, hi = window if window is not None else (t_pts[0], t_pts[-1])
    sel = (t_pts >= lo - 1e-12) & (t_pts <= hi + 1e-12)
    if sel.sum() < 2 or hi <= lo:
        raise EstimationError("the window must contain at least two grid times")
    if ensemble.n_replicas < 2:
        raise EstimationError("a standard error needs at least two replicas")
    x = t_pts[sel]
    y = data[:, sel]

    def slope(keep: np.ndarray) -> float:
        means = y[keep].mean(axis=0)
        if np.any(means <= 0):
            raise EstimationError("observable vanishes in the window (all replicas extinct)")
        return float(np.polyfit(x, np.log(means), 1)[0])

    lam, se = grouped_jackknife(ensemble.n_replicas, slope, groups)
    return LambdaEstimate(lam, se, (float(x[0]), float(x[-1])), observable, int(sel.sum()))


# ---------------------------------------------------------------------------
# size profiles


@dataclass
class ProfileDistance:
    distance: float
    ci: tuple
    n_survivors: int
    n_clusters: int
    censored: bool = False
    mean_size: float = math.nan


def _tv(freq: np.ndarray, target: np.ndarray) -> float:
    m = max(len(freq), len(target))
    a = np.zeros(m)
    b = np.zeros(m)
    a[:len(freq)] = freq
    b[:len(target)] = target
    return 0.5 * float(np.abs(a - b).sum())


def _profile_distance(ensemble: ReplicaEnsemble, target: np.ndarray, t: float, pool: str,
                      n_boot: int, level: float, seed: int) -> ProfileDistance:
    target = np.asarray(target, dtype=float)
    if np.any(target < 0) or abs(target.sum() - 1) > 1e-6:
        raise ValidationError("target must be a probability vector on sizes 1..N")
    k = ensemble.time_index(t)
    alive = ensemble.alive()[:, k]
    mat = ensemble.histogram_matrix(t, pool)[alive]
    if mat.shape[0] == 0 or mat.sum() == 0:
        return ProfileDistance(math.nan, (math.nan, math.nan), int(alive.sum()), 0, True)

    def stat(rows: np.ndarray) -> float:
        tot = rows.sum(axis=0)
        s = tot.sum()
        return _tv(tot / s, target) if s > 0 else 1.0

    dist = stat(mat)
    ci = bootstrap_ci(mat, stat, n_boot, level, np.random.default_rng(seed))
    tot = mat.sum(axis=0)
    mean_size = float((np.arange(1, len(tot) + 1) * tot).sum() / tot.sum())
    return ProfileDistance(dist, ci, int(alive.sum()), int(tot.sum()), False, mean_size)


def active_profile_distance(ensemble: ReplicaEnsemble, pi, t: float, n_boot: int = 200,
                            level: float = DEFAULT_LEVEL, seed: int = 0) -> ProfileDistance:
    """TV distance between pooled active size frequencies of surviving replicas and pi.

    If no replica is alive at t the result is flagged ``censored`` with a
    NaN distance.
    """
    return _profile_distance(ensemble, pi, t, "active", n_boot, level, seed)


def inactive_profile_distance(ensemble: ReplicaEnsemble, pi, t: float, n_boot: int = 200,
                              level: float = DEFAULT_LEVEL, seed: int = 0) -> ProfileDistance:
    """TV distance between pooled inactive frequencies and the size-biased pi."""
    return _profile_distance(ensemble, size_biased(pi), t, "inactive", n_boot, level, seed)


# ---------------------------------------------------------------------------
# tree functionals


@dataclass
class TreeExpectation:
    value: float
    tail_bound: float
    per_size: dict


def tree_functional_expectation(f: Callable, pi, n_cap: int, p: float = 1.0, c: float = 1.0,
                                tol: float = 1e-3, vanishes_above_cap: bool = False
                                ) -> TreeExpectation:
    """E[f(T_pi)]: size drawn from pi, then a uniform recursive tree of that size.

    Sizes up to ``n_cap`` are enumerated exactly. The remainder is bounded
    by c * sum_{n > cap} pi(n) n^p (zero when f vanishes above the cap) and
    must stay below ``tol``.
    """
    pi = np.asarray(pi, dtype=float)
    per_size = {}
    total = 0.0
    for n in range(1, min(n_cap, len(pi)) + 1):
        classes = enumerate_classes(n)
        mean = sum(f(t) for t in classes) / len(classes)
        per_size[n] = mean
        total += pi[n - 1] * mean
    if vanishes_above_cap:
        tail = 0.0
    else:
        sizes = np.arange(n_cap + 1, len(pi) + 1)
        tail = float(c * (pi[n_cap:] * sizes.astype(float) ** p).sum())
    if tail > tol:
        raise EstimationError(f"tail bound {tail:.3e} exceeds tol {tol:g}; raise n_cap")
    return TreeExpectation(total, tail, per_size)


def tree_profile_check(ensemble: ReplicaEnsemble, f: Callable, pi, t: float, n_cap: int,
                       pool: str = "active", n_boot: int = 200, level: float = DEFAULT_LEVEL,
                       seed: int = 0) -> CheckReport:
    """Pooled mean of f over clusters alive in a pool vs E[f(T_pi)] (E[f(T_pi~)] for inactive).

    f must vanish on trees larger than ``n_cap`` (only those are recorded).
    Passes when the prediction lies in the bootstrap interval of the pooled
    mean over surviving replicas.
    """
    if ensemble.fidelity != "tree" or float(t) not in ensemble.tree_times:
        raise ValidationError("tree classes were not recorded at this time")
    if n_cap > ensemble.tree_cap:
        raise ValidationError(f"trees were recorded only up to size {ensemble.tree_cap}")
    target = pi if pool == "active" else size_biased(pi)
    pred = tree_functional_expectation(f, target, n_cap, vanishes_above_cap=True)
    k = ensemble.time_index(t)
    alive = ensemble.alive()[:, k]
    counts = ensemble.counts(pool)[:, k]
    f_cache: dict = {}
    sums = np.zeros(ensemble.n_replicas)
    for r, trees in enumerate(ensemble.trees):
        for par, c in trees[float(t)][pool].items():
            if len(par) <= n_cap:
                v = f_cache.get(par)
                if v is None:
                    v = f_cache[par] = float(f(RecursiveTree.from_zero_based(list(par))))
                sums[r] += c * v
    rows = np.column_stack([sums, counts])[alive]
    if len(rows) == 0 or rows[:, 1].sum() == 0:
        return CheckReport(f"tree_profile_{pool}", math.nan, math.nan, False,
                           details={"censored": True})

    def stat(x: np.ndarray) -> float:
        return float(x[:, 0].sum() / x[:, 1].sum())

    est = stat(rows)
    ci = bootstrap_ci(rows, stat, n_boot, level, np.random.default_rng(seed))
    passed = ci[0] <= pred.value <= ci[1]
    return CheckReport(f"tree_profile_{pool}", est - pred.value, 0.0, passed, ci=ci,
                       seeds=ensemble.seeds, params=ensemble.params.to_dict(),
                       details={"empirical": est, "predicted": pred.value,
                                "survivors": int(alive.sum()), "time": t})


def tree_class_uniformity(ensemble: ReplicaEnsemble, n: int, t: float, pool: str = "active"
                          ) -> tuple[float, int, float]:
    """Chi-square of pooled tree classes of size n against the uniform law."""
    classes = enumerate_classes(n)
    index = {tuple(c.zero_based()): i for i, c in enumerate(classes)}
    counts = np.zeros(len(classes))
    for trees in ensemble.trees:
        for par, c in trees[float(t)][pool].items():
            if len(par) == n:
                counts[index[par]] += c
    return chi_square_gof(counts, np.full(len(classes), 1.0 / len(classes)))


# ---------------------------------------------------------------------------
# martingale and Kesten-Stigum


@dataclass
class MartingaleEstimate:
    times: np.ndarray
    paths: np.ndarray        # (replicas, times): exp(-lambda t) <X_t, h>
    survived: np.ndarray     # alive at the last grid time
    initial_value: float

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1]

    def mean_and_se(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.paths.mean(axis=0)
        se = self.paths.std(axis=0, ddof=1) / math.sqrt(len(self.paths))
        return m, se

    def flatness(self) -> dict:
        """Largest |mean - initial| / se over the grid.

        Grid points where the mean matches to rounding (t = 0) count as z = 0.
        """
        m, se = self.mean_and_se()
        diff = np.abs(m - self.initial_value)
        exact = diff <= 1e-12 * max(1.0, abs(self.initial_value))
        z = np.where(exact, 0.0, diff / np.where(se > 0, se, np.inf))
        return {"max_z": float(z.max()), "means": m, "se": se}


def _check_perron(ensemble: ReplicaEnsemble, perron: PerronTriple) -> None:
    a, b = ensemble.params, perron.params
    if (a.rates, a.variant) != (b.rates, b.variant):
        raise ValidationError("Perron triple computed for different parameters")


def martingale_paths(ensemble: ReplicaEnsemble, perron: PerronTriple) -> MartingaleEstimate:
    """exp(-lambda t) <X_t, h> along every replica."""
    _check_perron(ensemble, perron)
    h = perron.h_at
    values = ensemble.functional(lambda n: float(h([n])[0]), "active")
    paths = values * np.exp(-perron.lam * ensemble.times)[None, :]
    init = sum(c * float(h([n])[0]) for n, c in ensemble.initial.items())
    return MartingaleEstimate(ensemble.times.copy(), paths, ensemble.alive()[:, -1], init)


def kesten_stigum_check(ensemble: ReplicaEnsemble, perron: PerronTriple,
                        w_threshold: Optional[float] = None, T: Optional[float] = None,
                        max_fraction: float = 0.02) -> CheckReport:
    """Contingency of {W_T < threshold} against {extinct by T}."""
    if perron.lam <= 0:
        raise ValidationError("the Kesten-Stigum comparison needs a supercritical point")
    mart = martingale_paths(ensemble, perron)
    k = len(ensemble.times) - 1 if T is None else ensemble.time_index(T)
    thr = 0.01 * float(perron.h[0]) if w_threshold is None else w_threshold
    w = mart.paths[:, k]
    extinct = ~ensemble.alive()[:, k]
    small = w < thr
    table = {"survived_large": int(np.sum(~extinct & ~small)),
             "survived_small": int(np.sum(~extinct & small)),
             "extinct_large": int(np.sum(extinct & ~small)),
             "extinct_small": int(np.sum(extinct & small))}
    off = (table["survived_small"] + table["extinct_large"]) / ensemble.n_replicas
    return CheckReport("kesten_stigum", off, max_fraction, off < max_fraction,
                       seeds=ensemble.seeds, params=ensemble.params.to_dict(),
                       details={"table": table, "w_threshold": thr,
                                "time": float(ensemble.times[k])})


# ---------------------------------------------------------------------------
# moment bounds


def moment_bound_check(ensemble: ReplicaEnsemble, p: float, t: float) -> CheckReport:
    """MC mean of <X_t, [x^p]> against exp((2^{p-1} p beta - theta) t) <X_0, [x^p]>."""
    if p < 1:
        raise ValidationError("p must be at least 1")
    k = ensemble.time_index(t)
    vals = ensemble.functional(lambda n: float(n) ** p, "active")[:, k]
    beta, theta, _ = ensemble.params.rates
    x0 = sum(c * float(n) ** p for n, c in ensemble.initial.items())
    bound = math.exp((2 ** (p - 1) * p * beta - theta) * t) * x0
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    excess = mean - bound
    return CheckReport("moment_bound", excess, 3 * se, excess <= 3 * se,
                       seeds=ensemble.seeds, params=ensemble.params.to_dict(),
                       details={"mean": mean, "se": se, "bound": bound, "p": p, "time": t})


@dataclass
class WindowBound:
    mean: float
    mean_se: float
    mean_bound: float
    var: float
    var_se: float
    var_bound: float
    initial_p: float
    initial_2p: float

    @property
    def mean_ok(self) -> bool:
        return self.mean - self.mean_bound <= 3 * self.mean_se

    @property
    def var_ok(self) -> bool:
        return self.var - self.var_bound <= 3 * self.var_se


def growth_only_window(config: dict, beta: float, delta: float, K: int, p: float,
                       inner: int, stream) -> WindowBound:
    """Inner Monte Carlo of pure growth over one window started from ``config``."""
    growth = Params.growth_only(beta)

    def tail(hist: dict) -> float:
        return sum(c * float(n) ** p for n, c in hist.items() if n > K)

    start = tail(config)
    z = np.empty(inner)
    init = SizeState(0.0, config)
    for i in range(inner):
        engine = SizeEngine(growth, init)
        engine.run(stream, delta)
        z[i] = tail(engine.active) - start
    xp = sum(c * float(n) ** p for n, c in config.items())
    x2p = sum(c * float(n) ** (2 * p) for n, c in config.items())
    c_delta = math.exp(2 ** (p - 1) * p * beta * delta) - 1 + (1 - math.exp(-beta * delta * K)) * K ** p
    mean_bound = c_delta * xp
    var_bound = 2 * beta * delta * (4 ** p * p + K ** (2 * p + 1)) * x2p
    mean = float(z.mean())
    var = float(z.var(ddof=1))
    m4 = float(np.mean((z - mean) ** 4))
    var_se = math.sqrt(max(m4 - var * var, 0.0) / inner)
    return WindowBound(mean, float(z.std(ddof=1) / math.sqrt(inner)), mean_bound, var, var_se,
                       var_bound, xp, x2p)


def growth_only_bound_check(ensemble: ReplicaEnsemble, delta: float, K: int, p: float = 1.0,
                            inner: int = 200, n_windows: Optional[int] = None,
                            seed: int = 0) -> CheckReport:
    """Conditional mean and variance bounds for windowed pure-growth increments.

    Window starts are the active configurations of the ensemble at its grid
    times (one window per replica and time with a non-empty population).
    Each window runs ``inner`` independent pure-growth copies over ``delta``.
    The variance bound relies on exp(4^p p beta delta) - 1 <= 2 * 4^p p beta delta,
    so ``delta`` must be small.
    """
    beta = ensemble.params.beta
    configs = [hist for snaps in ensemble.active for hist in snaps if hist]
    if n_windows is not None:
        configs = configs[:n_windows]
    if not configs:
        raise EstimationError("no non-empty window start")
    results = []
    for w, config in enumerate(configs):
        stream = UniformStream(replica_rng(seed, w))
        results.append(growth_only_window(config, beta, delta, K, p, inner, stream))
    mean_viol = sum(1 for r in results if not r.mean_ok)
    var_viol = sum(1 for r in results if not r.var_ok)
    return CheckReport("growth_only_bounds", mean_viol + var_viol, 0, mean_viol + var_viol == 0,
                       seeds={"master": seed, "windows": len(results), "inner": inner},
                       params={"beta": beta, "delta": delta, "K": K, "p": p},
                       details={"windows": len(results), "mean_violations": mean_viol,
                                "variance_violations": var_viol,
                                "max_mean_ratio": max(r.mean / r.mean_bound for r in results
                                                      if r.mean_bound > 0),
                                "max_var_ratio": max(r.var / r.var_bound for r in results
                                                     if r.var_bound > 0)})


# ---------------------------------------------------------------------------
# second moment, cross-fidelity


def second_moment_mc(ensemble: ReplicaEnsemble, f: Callable[[int], float], t: float
                     ) -> tuple[float, float]:
    """MC estimate of E[<X_t, f>^2] with its standard error."""
    k = ensemble.time_index(t)
    v = ensemble.functional(f, "active")[:, k] ** 2
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def cross_fidelity_check(tree: ReplicaEnsemble, size: ReplicaEnsemble, t: float,
                         alpha: float = 0.01) -> CheckReport:
    """Two-sample tests on (<X_t,1>, <X_t,[x]>) between tree and size simulators.

    Runs a joint chi-square homogeneity test on the pairs and a KS test on
    each coordinate; the check passes when every p-value exceeds ``alpha``.
    """
    from scipy import stats

    ka, kb = tree.time_index(t), size.time_index(t)
    a = np.column_stack([tree.counts("active")[:, ka],
                         tree.functional(lambda n: n, "active")[:, ka]])
    b = np.column_stack([size.counts("active")[:, kb],
                         size.functional(lambda n: n, "active")[:, kb]])
    _, _, p_joint = two_sample_chi_square(a, b)
    p_count = float(stats.ks_2samp(a[:, 0], b[:, 0]).pvalue)
    p_mass = float(stats.ks_2samp(a[:, 1], b[:, 1]).pvalue)
    p_min = min(p_joint, p_count, p_mass)
    return CheckReport("cross_fidelity", p_min, alpha, p_min > alpha,
                       seeds={"tree": tree.seeds, "size": size.seeds},
                       params=tree.params.to_dict(),
                       details={"p_joint": p_joint, "p_count": p_count, "p_mass": p_mass,
                                "mean_count_tree": float(a[:, 0].mean()),
                                "mean_count_size": float(b[:, 0].mean())})
