"""Backward time-change sampling and the monotone coupling of two
modified processes (per-edge isolation) with infection rates beta <= beta'.

Conventions. For a cluster label ``u`` the slow process has birth size n
and the fast process birth size n' >= n. A size-1 cluster first waits for
one growth (rate beta) and is then treated as a size-2 cluster; ``m``
below is the effective size n + 1{n=1}.

Randomness for every label is a :class:`RandomnessBundle` derived from the
master seed and the label word, so both processes (and repeated runs) read
the same variates for the same label. Inside a bundle the layout is fixed:
a header (U_hat, V_hat draw, eta_hat, chi_hat, eta, chi) followed by blocks
holding the shared variates xi_hat_i and the private variates xi_i in
index order.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._random import derive_seed_sequence
from ._stats import chi_square_gof, ks_2d, ks_critical_value, two_sample_chi_square
from .params import Params, ResourceCapError, ValidationError
from .rrt import sample_split_size, split_size_law

_BUNDLE_TAG = 0x6B1E
_BLOCK = 16


class CouplingViolation(AssertionError):
    """A pathwise domination failed; carries a minimal reproducer."""

    def __init__(self, message: str, reproducer: dict):
        super().__init__(f"{message}; reproducer: {json.dumps(reproducer, sort_keys=True)}")
        self.reproducer = reproducer


class RandomnessBundle:
    """Lazily generated variates attached to one cluster label.

    ``u_hat`` is uniform on (0, 1]; ``v_uniform`` decides the event kind
    through :meth:`is_fragmentation`; all other variates are unit-rate
    exponentials. Shared (hatted) variates are read by both processes, the
    private ones only by the slow process during its catch-up phase.
    """

    __slots__ = ("key", "_gen", "u_hat", "v_uniform", "eta_hat", "chi_hat", "eta", "chi",
                 "_xi_hat", "_xi")

    def __init__(self, generator: np.random.Generator, key: tuple = ()):
        self.key = key
        self._gen = generator
        header = generator.random(2)
        self.u_hat = 1.0 - float(header[0])
        self.v_uniform = float(header[1])
        e = generator.standard_exponential(4).tolist()
        self.eta_hat, self.chi_hat, self.eta, self.chi = e
        self._xi_hat: list = []
        self._xi: list = []

    @classmethod
    def for_label(cls, master: int, label: str, stream: int = 0) -> "RandomnessBundle":
        """Bundle of ``label`` (a word over '1', '2'); ``stream`` separates experiments."""
        if any(c not in "12" for c in label):
            raise ValidationError(f"labels are words over '1' and '2', got {label!r}")
        key = (_BUNDLE_TAG, int(stream), len(label)) + tuple(int(c) for c in label)
        return cls(np.random.default_rng(derive_seed_sequence(master, *key)), key)

    @classmethod
    def for_index(cls, master: int, index: int) -> "RandomnessBundle":
        """Independent bundle number ``index`` (used for single-branch samples)."""
        key = (_BUNDLE_TAG, 1 << 20, int(index))
        return cls(np.random.default_rng(derive_seed_sequence(master, *key)), key)

    def _extend(self, needed: int) -> None:
        while len(self._xi_hat) < needed:
            block = self._gen.standard_exponential(2 * _BLOCK).tolist()
            self._xi_hat.extend(block[:_BLOCK])
            self._xi.extend(block[_BLOCK:])

    def xi_hat(self, i: int) -> float:
        """Shared growth variate, 1-based."""
        if i > len(self._xi_hat):
            self._extend(i)
        return self._xi_hat[i - 1]

    def xi(self, i: int) -> float:
        """Private growth variate, 1-based."""
        if i > len(self._xi):
            self._extend(i)
        return self._xi[i - 1]

    def is_fragmentation(self, theta: float, gamma: float) -> bool:
        return self.v_uniform < gamma / (gamma + theta)


@dataclass
class LifetimeSample:
    """One cluster's lifetime from the backward time-change sampler."""

    birth_size: int
    lifetime: float
    growth_times: list      # relative to birth, including the pre-growth when n = 1
    end_size: int
    pre_waiting: float      # W
    pre_growth: Optional[float] = None  # W tilde when n = 1
    steps: list = field(default_factory=list)  # waiting times Z_i that produced growths


def _backward(n: int, beta: float, end_rate: float, eta: float, chi: float,
              xi: Callable[[int], float]) -> LifetimeSample:
    """Backward time-change sampling of one lifetime.

    ``end_rate`` is gamma + theta; ``xi(i)`` returns the unit exponential
    behind the i-th growth after the pre-growth phase.
    """
    if n == 1:
        tau = chi / beta
        m = 2
        times = [tau]
        pre = tau
    else:
        tau = 0.0
        m = n
        times = []
        pre = None
    w = eta / (end_rate * (m - 1))
    kappa = w
    steps = []
    i = 0
    while True:
        z = xi(i + 1) / (beta * (m + i))
        if z >= kappa:
            break
        tau += z
        kappa = (m + i - 1) / (m + i) * (kappa - z)
        i += 1
        times.append(tau)
        steps.append(z)
    return LifetimeSample(n, tau + kappa, times, m + i, w, pre, steps)


def backward_lifetime(n: int, params: Params, bundle: RandomnessBundle) -> LifetimeSample:
    """Lifetime, growth times and end size of a birth-size-n cluster.

    Uses the bundle's shared variates: W = eta_hat / ((gamma+theta)(m-1)),
    W tilde = chi_hat / beta and Z_i = xi_hat_i / (beta (m+i-1)).
    """
    if int(n) != n or n < 1:
        raise ValidationError(f"birth size must be a positive integer, got {n}")
    beta, theta, gamma = params.rates
    if beta <= 0 or theta + gamma <= 0:
        raise ValidationError("need beta > 0 and theta + gamma > 0")
    return _backward(int(n), beta, theta + gamma, bundle.eta_hat, bundle.chi_hat, bundle.xi_hat)


def predicted_lifetimes(sample: LifetimeSample) -> np.ndarray:
    """Closed form for tau_i + kappa_i, i = 0..k (k growths after the pre-growth)."""
    n = sample.birth_size
    m = n + (n == 1)
    base = sample.pre_growth if n == 1 else 0.0
    z = np.asarray(sample.steps, dtype=float)
    out = np.empty(len(z) + 1)
    for i in range(len(z) + 1):
        weights = (i + 1 - np.arange(1, i + 1)) / (m + i - 1)
        out[i] = base + (m - 1) / (m + i - 1) * sample.pre_waiting + float(weights @ z[:i])
    return out


def direct_lifetime(n: int, params: Params, rng: np.random.Generator) -> tuple[float, int]:
    """Competing exponential clocks for one cluster of the modified process."""
    beta, theta, gamma = params.rates
    t = 0.0
    s = n
    while True:
        grow = beta * s
        end = (theta + gamma) * (s - 1)
        total = grow + end
        t += rng.exponential(1.0 / total)
        if rng.random() * total < end:
            return t, s
        s += 1


def time_change_identity_check(a1: float, a2: float, a3: float, n_samples: int = 10 ** 5,
                               seed: int = 0, alpha: float = 0.01) -> dict:
    """2D two-sample KS between (Z1, (a2/a3)(Z2-Z1)) and (Z1, Z3) on {Z1 <= Z2}.

    The two sides are drawn from independent streams of ``n_samples`` triples
    each and restricted to the event.
    """
    for name, a in (("a1", a1), ("a2", a2), ("a3", a3)):
        if not a > 0 or not math.isfinite(a):
            raise ValidationError(f"{name} must be a positive rate, got {a}")
    rng_l = np.random.default_rng(derive_seed_sequence(seed, 0))
    rng_r = np.random.default_rng(derive_seed_sequence(seed, 1))
    z1 = rng_l.exponential(1 / a1, n_samples)
    z2 = rng_l.exponential(1 / a2, n_samples)
    keep = z1 <= z2
    left = np.column_stack([z1[keep], (a2 / a3) * (z2[keep] - z1[keep])])
    y1 = rng_r.exponential(1 / a1, n_samples)
    y2 = rng_r.exponential(1 / a2, n_samples)
    y3 = rng_r.exponential(1 / a3, n_samples)
    keep = y1 <= y2
    right = np.column_stack([y1[keep], y3[keep]])
    d, p = ks_2d(left, right)
    return {"statistic": d, "p_value": p, "alpha": alpha, "passed": p > alpha,
            "n_left": len(left), "n_right": len(right)}


@dataclass
class FragmentationOutcome:
    fragmentation: bool
    children: Optional[tuple]        # (N - j, j) in the slow process
    children_prime: Optional[tuple]  # (N' - j', j') in the fast process


def coupled_fragmentation(N: int, N_prime: int, u_hat: float, fragmentation: bool
                          ) -> FragmentationOutcome:
    """Shared-uniform split of end sizes N <= N'; the kind is shared too."""
    if N > N_prime:
        raise ValidationError(f"need N <= N', got {N} > {N_prime}")
    if not fragmentation:
        return FragmentationOutcome(False, None, None)
    if N < 2:
        raise ValidationError("fragmentation needs clusters of size >= 2")
    j = sample_split_size(N, u_hat)
    jp = sample_split_size(N_prime, u_hat)
    return FragmentationOutcome(True, (N - j, j), (N_prime - jp, jp))


@dataclass
class CoupledClusterSample:
    """One label followed in both processes (primed fields: fast process)."""

    n: int
    n_prime: int
    lifetime: float
    lifetime_prime: float
    growth_times: list
    growth_times_prime: list
    end_size: int
    end_size_prime: int
    fragmentation: bool
    children: Optional[tuple] = None
    children_prime: Optional[tuple] = None
    private_growths: int = 0

    def violations(self) -> list:
        out = []
        if self.lifetime_prime > self.lifetime:
            out.append("fast lifetime exceeds slow lifetime")
        if self.end_size > self.end_size_prime:
            out.append("slow end size exceeds fast end size")
        if self.fragmentation:
            (a, j), (ap, jp) = self.children, self.children_prime
            if j > jp:
                out.append("detached part not dominated")
            if a > ap:
                out.append("root part not dominated")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(n: int, n_prime: int, beta: float, beta_prime: float, theta: float,
                gamma: float) -> None:
    if int(n) != n or int(n_prime) != n_prime or n < 1:
        raise ValidationError(f"birth sizes must be positive integers, got {n}, {n_prime}")
    if n > n_prime:
        raise ValidationError(f"need n <= n', got {n} > {n_prime}")
    if not 0 < beta <= beta_prime:
        raise ValidationError(f"need 0 < beta <= beta', got {beta}, {beta_prime}")
    if theta <= 0 or gamma <= 0:
        raise ValidationError("theta and gamma must be positive")


def coupled_branch(n: int, n_prime: int, beta: float, beta_prime: float, theta: float,
                   gamma: float, bundle: RandomnessBundle, strict: bool = True,
                   reproducer: Optional[dict] = None) -> CoupledClusterSample:
    """Couple one label's lifetime in the slow (n, beta) and fast (n', beta') process.

    Both sides share eta_hat for the pre-waiting time. If n = n' they also
    share all growth variates. Otherwise the slow side first makes
    n' - n - 1{n=1} growths (plus the pre-growth when n = 1) from private
    variates and then reads the shared ones, now at the same size as the
    fast side at birth.
    """
    _check_pair(n, n_prime, beta, beta_prime, theta, gamma)
    end_rate = theta + gamma
    fast = _backward(n_prime, beta_prime, end_rate, bundle.eta_hat, bundle.chi_hat, bundle.xi_hat)
    if n == n_prime:
        slow = _backward(n, beta, end_rate, bundle.eta_hat, bundle.chi_hat, bundle.xi_hat)
        k0 = 0
    else:
        k0 = n_prime - n - (n == 1)
        xi_hat, xi = bundle.xi_hat, bundle.xi

        def slow_xi(i: int) -> float:
            return xi(i) if i <= k0 else xi_hat(i - k0)

        slow = _backward(n, beta, end_rate, bundle.eta_hat, bundle.chi, slow_xi)
    frag = bundle.is_fragmentation(theta, gamma)
    outcome = coupled_fragmentation(slow.end_size, fast.end_size, bundle.u_hat, frag)
    sample = CoupledClusterSample(
        n=n, n_prime=n_prime, lifetime=slow.lifetime, lifetime_prime=fast.lifetime,
        growth_times=slow.growth_times, growth_times_prime=fast.growth_times,
        end_size=slow.end_size, end_size_prime=fast.end_size, fragmentation=frag,
        children=outcome.children, children_prime=outcome.children_prime,
        private_growths=k0 + (n == 1 and n_prime > 1),
    )
    if strict:
        bad = sample.violations()
        if bad:
            info = {"n": n, "n_prime": n_prime, "beta": beta, "beta_prime": beta_prime,
                    "theta": theta, "gamma": gamma, "bundle_key": list(bundle.key)}
            info.update(reproducer or {})
            raise CouplingViolation("; ".join(bad), info)
    return sample


@dataclass
class LabelRecord:
    label: str
    birth: float
    birth_prime: float
    sample: CoupledClusterSample

    @property
    def end(self) -> float:
        return self.birth + self.sample.lifetime

    @property
    def end_prime(self) -> float:
        return self.birth_prime + self.sample.lifetime_prime

    def alive(self, t: float, fast: bool = False) -> bool:
        if fast:
            return self.birth_prime <= t < self.end_prime
        return self.birth <= t < self.end

    def size_at(self, t: float, fast: bool = False) -> int:
        """Active size at time ``t`` (0 if not alive)."""
        if not self.alive(t, fast):
            return 0
        s = self.sample
        birth = self.birth_prime if fast else self.birth
        times = s.growth_times_prime if fast else s.growth_times
        n = s.n_prime if fast else s.n
        return n + sum(1 for g in times if birth + g <= t)

    def to_dict(self) -> dict:
        return {"label": self.label, "birth": self.birth, "birth_prime": self.birth_prime,
                **self.sample.to_dict()}


@dataclass
class CoupledRun:
    """Two coupled modified processes on [0, T] and the stopping-line statistics."""

    params: Params
    beta_prime: float
    n0: int
    n0_prime: int
    horizon: float
    master_seed: int
    records: dict
    stopping: dict   # slow-alive label -> (tau_T(u), N_T(u))

    def alive(self, fast: bool = False) -> list:
        return [u for u, r in self.records.items() if r.alive(self.horizon, fast)]

    def count(self, fast: bool = False) -> int:
        return len(self.alive(fast))

    def size_histogram(self, fast: bool = False) -> dict:
        hist: dict = {}
        for r in self.records.values():
            s = r.size_at(self.horizon, fast)
            if s:
                hist[s] = hist.get(s, 0) + 1
        return hist

    def to_jsonl(self, handle) -> None:
        for u in sorted(self.records, key=lambda w: (len(w), w)):
            handle.write(json.dumps(self.records[u].to_dict(), separators=(",", ":")) + "\n")


def coupled_processes(n0: int, n0_prime: int, beta: float, beta_prime: float, theta: float,
                      gamma: float, T: float, master_seed: int, stream: int = 0,
                      label_cap: int = 10 ** 6, strict: bool = True) -> CoupledRun:
    """Build both modified processes on [0, T] label by label in breadth-first order.

    Both processes share the genealogy (the event kind of each label is
    common), fast births precede slow births, and each label alive at T in
    the slow process is matched with tau_T(u), its fast-side birth time,
    and N_T(u), the number of its fast-side descendants alive at T.
    """
    _check_pair(n0, n0_prime, beta, beta_prime, theta, gamma)
    params = Params(beta, theta, gamma, "modified-edge-isolation")
    records: dict = {}
    queue = deque([("", 0.0, 0.0, int(n0), int(n0_prime))])
    while queue:
        label, birth, birth_p, n, n_p = queue.popleft()
        if len(records) >= label_cap:
            raise ResourceCapError(f"coupled run exceeded {label_cap} labels")
        bundle = RandomnessBundle.for_label(master_seed, label, stream)
        repro = {"label": label, "master_seed": master_seed, "stream": stream}
        sample = coupled_branch(n, n_p, beta, beta_prime, theta, gamma, bundle, strict, repro)
        rec = LabelRecord(label, birth, birth_p, sample)
        if strict and birth_p > birth:
            raise CouplingViolation("fast birth after slow birth",
                                    {**repro, "birth": birth, "birth_prime": birth_p})
        records[label] = rec
        if sample.fragmentation and rec.end_prime <= T:
            (a, j), (ap, jp) = sample.children, sample.children_prime
            queue.append((label + "1", rec.end, rec.end_prime, a, ap))
            queue.append((label + "2", rec.end, rec.end_prime, j, jp))
    slow_alive = {u for u, r in records.items() if r.alive(T)}
    offspring = dict.fromkeys(slow_alive, 0)
    for v, r in records.items():
        if r.alive(T, True):
            for k in range(len(v) + 1):
                if v[:k] in slow_alive:
                    offspring[v[:k]] += 1
                    break
    stopping = {}
    for u in slow_alive:
        rec = records[u]
        if strict and not (rec.birth_prime <= T and rec.sample.n_prime > 0):
            raise CouplingViolation("slow-alive label has no live fast counterpart",
                                    {"label": u, "master_seed": master_seed})
        stopping[u] = (rec.birth_prime, offspring[u])
    return CoupledRun(params, beta_prime, int(n0), int(n0_prime), T, master_seed, records, stopping)


def modified_phase_check(params: Params, N: int = 256, tol: float = 1e-6) -> dict:
    """Sign of the modified exponent against sign(gamma - theta)."""
    from .spectral import malthusian_exponent

    base = params.replace(variant="standard")
    lam, _ = malthusian_exponent(base, tol=tol, N0=N)
    lam_mod, _ = malthusian_exponent(base.replace(variant="modified-edge-isolation"), tol=tol,
                                     N0=N)
    diff = params.gamma - params.theta
    expected = 0 if abs(diff) < 1e-12 else int(math.copysign(1, diff))
    sign = 0 if abs(lam_mod) < 10 * tol else int(math.copysign(1, lam_mod))
    return {"lambda": lam, "lambda_modified": lam_mod, "sign": sign, "expected_sign": expected,
            "consistent": sign == expected}


def branch_marginal_check(n: int, params: Params, n_samples: int, seed: int,
                          alpha: float = 0.01) -> dict:
    """Backward sampler vs competing clocks: KS on lifetimes, chi-square on end sizes."""
    from scipy import stats

    back = [backward_lifetime(n, params, RandomnessBundle.for_index(seed, i))
            for i in range(n_samples)]
    rng = np.random.default_rng(derive_seed_sequence(seed, 2))
    direct = [direct_lifetime(n, params, rng) for _ in range(n_samples)]
    lt_b = np.array([s.lifetime for s in back])
    lt_d = np.array([d[0] for d in direct])
    ks = stats.ks_2samp(lt_b, lt_d)
    chi = two_sample_chi_square(np.array([s.end_size for s in back]),
                                np.array([d[1] for d in direct]))
    return {"ks_statistic": float(ks.statistic), "ks_p": float(ks.pvalue),
            "ks_critical": ks_critical_value(n_samples, n_samples, alpha),
            "chi2": chi[0], "chi2_dof": chi[1], "chi2_p": chi[2],
            "passed": ks.pvalue > alpha and chi[2] > alpha}


def split_marginal_check(N: int, n_samples: int, seed: int, alpha: float = 0.01) -> dict:
    """Detached sizes from the floor formula vs the split law (chi-square)."""
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(n_samples)
    counts = np.zeros(N - 1)
    for x in u.tolist():
        counts[sample_split_size(N, x) - 1] += 1
    probs = [split_size_law(N, j) for j in range(1, N)]
    stat, dof, p = chi_square_gof(counts, probs)
    return {"chi2": stat, "dof": dof, "p_value": p, "passed": p > alpha}


def sweep_branches(n: int, n_prime: int, beta: float, beta_prime: float, theta: float,
                   gamma: float, n_samples: int, seed: int) -> dict:
    """Count pathwise violations over independent coupled branches."""
    bad = 0
    first = None
    slow_life, fast_life, slow_end, fast_end = [], [], [], []
    for i in range(n_samples):
        s = coupled_branch(n, n_prime, beta, beta_prime, theta, gamma,
                           RandomnessBundle.for_index(seed, i), strict=False)
        v = s.violations()
        if v:
            bad += 1
            if first is None:
                first = {"index": i, "seed": seed, "violations": v}
        slow_life.append(s.lifetime)
        fast_life.append(s.lifetime_prime)
        slow_end.append(s.end_size)
        fast_end.append(s.end_size_prime)
    return {"violations": bad, "first_violation": first,
            "lifetimes": np.array(slow_life), "lifetimes_prime": np.array(fast_life),
            "end_sizes": np.array(slow_end), "end_sizes_prime": np.array(fast_end)}


def offspring_summary(runs: Sequence[CoupledRun]) -> dict:
    """Mean N_T(u) over all slow-alive labels of all runs, with standard error."""
    values = np.array([nt for run in runs for (_, nt) in run.stopping.values()], dtype=float)
    if len(values) == 0:
        return {"mean": math.nan, "se": math.nan, "count": 0}
    se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else math.nan
    return {"mean": float(values.mean()), "se": se, "count": int(len(values))}
