"""Verification suite: one check per acceptance criterion.

Each check returns a :class:`CheckReport` whose ``details`` carry the raw
numbers, so callers can re-assert thresholds independently. The ``full``
profile uses the acceptance sample sizes; ``desk`` is a quicker variant for
interactive runs.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from . import coupling, estimators as est, spectral
from ._random import UniformStream, derive_seed_sequence
from ._stats import chi_square_gof, two_sample_chi_square
from .params import Params
from .rrt import enumerate_classes, sample_uniform_rrt, split_at_edge, split_size_fraction

SUPERCRITICAL = Params(1.0, 0.1, 1.0)
SUBCRITICAL = Params(1.0, 0.5, 0.5)   # gamma = theta, so lambda = -theta exactly


@dataclass(frozen=True)
class Profile:
    name: str
    lln_replicas: int
    cross_replicas: int
    second_moment_replicas: int
    subcritical_replicas: int
    coupled_branches: int
    coupled_pairs: int
    marginal_samples: int
    split_samples: int
    windows: int
    inner: int


PROFILES = {
    "full": Profile("full", 1000, 10_000, 100_000, 40_000, 100_000, 1000, 100_000, 100_000,
                    1000, 200),
    "desk": Profile("desk", 200, 2000, 10_000, 5000, 10_000, 100, 10_000, 20_000, 200, 100),
}

# points at which the spectral criteria are evaluated
SPECTRAL_POINTS = [(1.0, 1.0, 1.0), (1.0, 0.5, 2.0), (1.0, 0.1, 0.2), (2.0, 0.5, 4.0),
                   (1.0, 0.2, 1.0), (0.5, 1.0, 2.0), (4.0, 2.0, 1.0)]


def _report(name, statistic, threshold, passed, **details) -> est.CheckReport:
    return est.CheckReport(name, statistic, threshold, bool(passed), details=details)


def check_gamma_equals_theta(profile: Profile) -> est.CheckReport:
    started = time.perf_counter()
    lam, diag = spectral.malthusian_exponent(Params(1, 1, 1), N0=256, N_cap=256)
    seconds = time.perf_counter() - started
    h = diag["triple"].h[: diag["triple"].diagnostics["interior"]]
    spread = float((h.max() - h.min()) / abs(h.mean()))
    err = abs(lam + 1)
    return _report("gamma_equals_theta", err, 1e-6, err < 1e-6 and spread < 1e-6 and seconds < 10,
                   **{"lambda": lam, "h_relative_spread": spread, "seconds": seconds})


def check_variant_shifts(profile: Profile) -> est.CheckReport:
    """Modified (per-edge isolation) and vertex-removal generators against the standard one."""
    rows = []
    for b, t, g in SPECTRAL_POINTS[:5]:
        p = Params(b, t, g)
        std = spectral.perron_triple(p, 256, gap=False, cross_check=False)
        mod = spectral.perron_triple(p, 256, variant="modified", gap=False, cross_check=False)
        vr = spectral.perron_triple(p, 256, variant="vertex-removal", gap=False, cross_check=False)
        rows.append({
            "params": [b, t, g],
            "modified_minus_lambda_plus_theta": abs(mod.lam - (std.lam + t)),
            "modified_minus_lambda_minus_theta": abs(mod.lam - (std.lam - t)),
            "vertex_removal_shift_error": abs(vr.lam - (std.lam - g)),
            "pi_diff": float(max(np.abs(mod.pi - std.pi).max(), np.abs(vr.pi - std.pi).max())),
            "h_diff": float(max(np.abs(mod.h - std.h).max(), np.abs(vr.h - std.h).max())),
        })
    worst = max(max(r["modified_minus_lambda_plus_theta"], r["vertex_removal_shift_error"],
                    r["pi_diff"], r["h_diff"]) for r in rows)
    literal = max(r["modified_minus_lambda_minus_theta"] for r in rows)
    return _report("variant_shifts", worst, 1e-8, worst < 1e-8, rows=rows,
                   literal_minus_theta_error=literal)


def check_homogeneity(profile: Profile, seed: int = 3) -> est.CheckReport:
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(10):
        b = float(rng.uniform(0.5, 2.0))
        t = float(rng.uniform(0.1, 1.5))
        g = float(rng.uniform(0.1, 3.0))
        lam1, _ = spectral.malthusian_exponent(Params(b, t, g), tol=1e-8, cross_check=False)
        lam2, _ = spectral.malthusian_exponent(Params(2 * b, 2 * t, 2 * g), tol=1e-8,
                                               cross_check=False)
        rows.append({"params": [b, t, g], "error": abs(lam2 - 2 * lam1)})
    worst = max(r["error"] for r in rows)
    return _report("homogeneity", worst, 1e-6, worst < 1e-6, rows=rows)


def check_residuals(profile: Profile) -> est.CheckReport:
    rows = []
    for b, t, g in SPECTRAL_POINTS:
        for variant in spectral.GENERATOR_VARIANTS:
            tr = spectral.perron_triple(Params(b, t, g), 256, variant=variant, gap=False,
                                        cross_check=False, tol=1.0)
            rows.append({"params": [b, t, g], "variant": variant,
                         "left": tr.diagnostics["left_residual_l1"],
                         "right": tr.diagnostics["right_residual_sup"]})
    worst = max(max(r["left"], r["right"]) for r in rows)
    return _report("eigen_residuals", worst, 1e-8, worst < 1e-8, rows=rows)


def check_critical_curve(profile: Profile) -> est.CheckReport:
    thetas = [round(0.1 * k, 1) for k in range(1, 10)]
    rows = []
    for th in thetas:
        gc, info = spectral.critical_gamma(1.0, th)
        lo, hi = spectral.critical_bracket(1.0, th)
        lam, _ = spectral.malthusian_exponent(Params(1.0, th, gc), cross_check=False)
        rows.append({"theta": th, "gamma_c": gc, "lower": lo, "upper": hi, "lambda": lam})
    inside = all(r["lower"] <= r["gamma_c"] <= r["upper"] for r in rows)
    increasing = all(a["gamma_c"] < b["gamma_c"] for a, b in zip(rows, rows[1:]))
    worst = max(abs(r["lambda"]) for r in rows)
    return _report("critical_curve", worst, 1e-6, inside and increasing and worst < 1e-6,
                   rows=rows, inside=inside, increasing=increasing)


def check_theta_slope(profile: Profile) -> est.CheckReport:
    rows = []
    for b, t, g in itertools.product((0.5, 1.0, 2.0), (0.1, 0.5, 1.0), (0.5, 1.0, 2.0)):
        lam0, _ = spectral.malthusian_exponent(Params(b, t, g), cross_check=False)
        for d in (0.1, 0.5):
            lam1, _ = spectral.malthusian_exponent(Params(b, t + d, g), cross_check=False)
            rows.append({"params": [b, t, g], "delta": d, "excess": lam1 - (lam0 - d)})
    worst = max(r["excess"] for r in rows)
    return _report("theta_slope", worst, 1e-6, worst <= 1e-6, rows=rows)


def check_beta_monotonicity(profile: Profile) -> est.CheckReport:
    betas = (0.5, 1.0, 2.0, 4.0)
    series = {}
    for t, g in ((1.0, 2.0), (2.0, 1.0), (1.0, 1.0)):
        series[f"{t},{g}"] = [spectral.malthusian_exponent(Params(b, t, g), cross_check=False)[0]
                              for b in betas]
    up = series["1.0,2.0"]
    down = series["2.0,1.0"]
    flat = series["1.0,1.0"]
    ok_up = all(b - a > 1e-6 for a, b in zip(up, up[1:]))
    ok_down = all(a - b > 1e-6 for a, b in zip(down, down[1:]))
    flat_err = max(abs(v + 1.0) for v in flat)
    passed = ok_up and ok_down and flat_err < 1e-6
    return _report("beta_monotonicity", flat_err, 1e-6, passed, betas=list(betas),
                   series=series, increasing=ok_up, decreasing=ok_down)


def exact_split_distribution(n: int) -> dict:
    """Exhaustive law of (root part, detached part) over all trees and edges of size n."""
    trees = enumerate_classes(n)
    weight = Fraction(1, len(trees) * (n - 1))
    law: dict = {}
    for tree in trees:
        for child in range(2, n + 1):
            out = split_at_edge(tree, child)
            key = (out.root_part.parents, out.detached_part.parents)
            law[key] = law.get(key, 0) + weight
    return law


def check_splitting_law(profile: Profile, seed: int = 8) -> est.CheckReport:
    rows = []
    n_samples = profile.split_samples
    for n in (3, 5, 8):
        stream = UniformStream(np.random.default_rng(derive_seed_sequence(seed, n)))
        counts = np.zeros(n - 1)
        for _ in range(n_samples):
            tree = sample_uniform_rrt(n, stream)
            out = split_at_edge(tree, 2 + stream.below(n - 1))
            counts[out.detached_size - 1] += 1
        probs = [float(split_size_fraction(n, j)) for j in range(1, n)]
        stat, dof, p = chi_square_gof(counts, probs)
        rows.append({"n": n, "test": "detached size", "chi2": stat, "dof": dof, "p": p})
    exact_ok = True
    for n in range(2, 7):
        law = exact_split_distribution(n)
        for (rp, dp), pr in law.items():
            j = len(dp) + 1
            expected = split_size_fraction(n, j) / (math.factorial(n - j - 1) * math.factorial(j - 1))
            exact_ok &= pr == expected
        keys = sorted(law)
        index = {k: i for i, k in enumerate(keys)}
        stream = UniformStream(np.random.default_rng(derive_seed_sequence(seed, 100 + n)))
        counts = np.zeros(len(keys))
        for _ in range(n_samples):
            tree = sample_uniform_rrt(n, stream)
            out = split_at_edge(tree, 2 + stream.below(n - 1))
            counts[index[(out.root_part.parents, out.detached_part.parents)]] += 1
        stat, dof, p = chi_square_gof(counts, [float(law[k]) for k in keys])
        rows.append({"n": n, "test": "part classes", "chi2": stat, "dof": dof, "p": p})
    worst = min(r["p"] for r in rows)
    return _report("splitting_law", worst, 0.001, worst > 0.001 and exact_ok, rows=rows,
                   exhaustive_law_matches=exact_ok)


def time_for_mean_count(params: Params, target: float, N: int = 256) -> float:
    from scipy.optimize import brentq

    gen = spectral.build_generator(params, N)
    return float(brentq(lambda t: spectral.mean_active_count(gen, t) - target, 0.0, 60.0))


def check_cross_fidelity(profile: Profile, seed: int = 90) -> est.CheckReport:
    t = round(time_for_mean_count(SUPERCRITICAL, 50.0), 2)
    started = time.perf_counter()
    tree = est.run_ensemble(SUPERCRITICAL, [t], profile.cross_replicas, seed, fidelity="tree")
    size = est.run_ensemble(SUPERCRITICAL, [t], profile.cross_replicas, seed + 1, fidelity="size")
    seconds = time.perf_counter() - started
    rep = est.cross_fidelity_check(tree, size, t)
    rep.details.update({"time": t, "seconds": seconds})
    rep.passed = rep.passed and seconds < 120
    return rep


class LLNData:
    """Shared tree-level ensemble for the large-population checks."""

    def __init__(self, profile: Profile, seed: int = 110):
        self.perron = spectral.perron_triple(SUPERCRITICAL, 256)
        self.T = round(math.log(1000.0) / self.perron.lam, 4)
        self.times = [round(self.T * k / 10, 6) for k in range(11)]
        self.times[-1] = self.T
        started = time.perf_counter()
        self.ensemble = est.run_ensemble(SUPERCRITICAL, self.times, profile.lln_replicas, seed,
                                         fidelity="tree", tree_times=[self.T], tree_cap=6)
        self.seconds = time.perf_counter() - started


def check_malthusian_mc(profile: Profile, lln: LLNData, seed: int = 100) -> est.CheckReport:
    sup = est.mc_lambda(lln.ensemble, (lln.T / 2, lln.T), "clusters")
    lam_sub = spectral.malthusian_exponent(SUBCRITICAL)[0]
    times = [0.5 * k for k in range(17)]
    sub_ens = est.run_ensemble(SUBCRITICAL, times, profile.subcritical_replicas, seed)
    sub = est.mc_lambda(sub_ens, (3.0, 7.5), "isolations")
    z_sup = abs(sup.lam - lln.perron.lam) / sup.se
    z_sub = abs(sub.lam - lam_sub) / sub.se
    return _report("malthusian_mc", max(z_sup, z_sub), 3.0, z_sup < 3 and z_sub < 3,
                   supercritical={"mc": sup.lam, "se": sup.se, "spectral": lln.perron.lam,
                                  "z": z_sup, "window": sup.window},
                   subcritical={"mc": sub.lam, "se": sub.se, "spectral": lam_sub, "z": z_sub,
                                "window": sub.window, "observable": "isolations"})


def check_lln_profiles(profile: Profile, lln: LLNData) -> est.CheckReport:
    act = est.active_profile_distance(lln.ensemble, lln.perron.pi, lln.T)
    ina = est.inactive_profile_distance(lln.ensemble, lln.perron.pi, lln.T)
    worst = max(act.distance, ina.distance)
    return _report("lln_profiles", worst, 0.05, act.distance < 0.05 and ina.distance < 0.05,
                   active=act.__dict__, inactive=ina.__dict__, time=lln.T,
                   seconds=lln.seconds)


def check_martingale(profile: Profile, lln: LLNData) -> est.CheckReport:
    mart = est.martingale_paths(lln.ensemble, lln.perron)
    flat = mart.flatness()
    ks = est.kesten_stigum_check(lln.ensemble, lln.perron)
    z = flat["max_z"]
    return _report("martingale_kesten_stigum", z, 3.0, z < 3 and ks.passed,
                   max_z=z, means=flat["means"], se=flat["se"], initial=mart.initial_value,
                   off_diagonal=ks.statistic, table=ks.details["table"])


def check_second_moment(profile: Profile, seed: int = 130) -> est.CheckReport:
    times = [1.0, 2.0]
    ens = est.run_ensemble(SUPERCRITICAL, times, profile.second_moment_replicas, seed)
    gen = spectral.build_generator(SUPERCRITICAL, 256)
    rows = []
    for t in times:
        mc, se = est.second_moment_mc(ens, lambda n: 1.0, t)
        exact, qerr = spectral.second_moment(1.0, t, 1, gen)
        rows.append({"time": t, "mc": mc, "se": se, "spectral": exact, "z": abs(mc - exact) / se})
    worst = max(r["z"] for r in rows)
    return _report("second_moment", worst, 3.0, worst < 3, rows=rows)


COUPLING_CASES = [  # (n, n', beta, beta', theta, gamma)
    (1, 1, 1.0, 1.0, 1.0, 1.0),
    (1, 3, 1.0, 1.0, 1.0, 1.0),
    (2, 5, 1.0, 1.7, 0.5, 1.0),
    (3, 3, 1.0, 2.0, 1.0, 0.5),
]


def check_coupling(profile: Profile, seed: int = 140) -> est.CheckReport:
    from scipy import stats

    per_case = profile.coupled_branches // len(COUPLING_CASES)
    branch_violations = 0
    marginals = []
    for k, case in enumerate(COUPLING_CASES):
        sweep = coupling.sweep_branches(*case, n_samples=per_case, seed=seed + k)
        branch_violations += sweep["violations"]
        n, n_p, b, b_p, th, ga = case
        m = min(per_case, profile.marginal_samples)
        for side, size, beta, lifetimes, ends in (
                ("slow", n, b, sweep["lifetimes"][:m], sweep["end_sizes"][:m]),
                ("fast", n_p, b_p, sweep["lifetimes_prime"][:m], sweep["end_sizes_prime"][:m])):
            rng = np.random.default_rng(derive_seed_sequence(seed, k, side == "fast"))
            p = Params(beta, th, ga, "modified-edge-isolation")
            direct = [coupling.direct_lifetime(size, p, rng) for _ in range(m)]
            ks = stats.ks_2samp(lifetimes, [d[0] for d in direct])
            chi = two_sample_chi_square(ends, np.array([d[1] for d in direct]))
            marginals.append({"case": list(case), "side": side, "ks_p": float(ks.pvalue),
                              "end_size_p": chi[2]})
    split = coupling.split_marginal_check(7, profile.marginal_samples, seed + 50)
    pair_violations = 0
    counts = []
    for i in range(profile.coupled_pairs):
        try:
            run = coupling.coupled_processes(1, 2, 1.0, 1.5, 0.5, 1.0, 3.0, seed * 1000 + i)
        except coupling.CouplingViolation:
            pair_violations += 1
            continue
        counts.append((run.count(), run.count(True), run))
    offspring = coupling.offspring_summary([c[2] for c in counts])
    tc = coupling.time_change_identity_check(1.0, 1.0, 1.0, profile.marginal_samples, seed + 60)
    tc2 = coupling.time_change_identity_check(0.5, 2.0, 1.0, profile.marginal_samples, seed + 61)
    min_p = min(min(r["ks_p"] for r in marginals), split["p_value"], tc["p_value"],
                tc2["p_value"])
    # end-size tests are supplementary; Bonferroni keeps the family at the same level
    end_size_level = 0.01 / len(marginals)
    min_end_p = min(r["end_size_p"] for r in marginals)
    passed = (branch_violations == 0 and pair_violations == 0 and min_p > 0.01
              and min_end_p > end_size_level)
    return _report("coupling", branch_violations + pair_violations, 0, passed,
                   branch_violations=branch_violations, pair_violations=pair_violations,
                   branches=per_case * len(COUPLING_CASES), pairs=profile.coupled_pairs,
                   marginals=marginals, split_p=split["p_value"],
                   time_change_p=[tc["p_value"], tc2["p_value"]],
                   time_change_statistic=[tc["statistic"], tc2["statistic"]], min_p=min_p,
                   min_end_size_p=min_end_p, end_size_level=end_size_level,
                   mean_count_slow=float(np.mean([c[0] for c in counts])),
                   mean_count_fast=float(np.mean([c[1] for c in counts])),
                   offspring_mean=offspring["mean"], offspring_se=offspring["se"])


def check_growth_only_bounds(profile: Profile, seed: int = 150) -> est.CheckReport:
    times = [1.0, 2.0, 3.0, 4.0, 5.0]
    replicas = int(math.ceil(profile.windows / len(times) * 1.6))
    ens = est.run_ensemble(SUPERCRITICAL, times, replicas, seed)
    rep = est.growth_only_bound_check(ens, delta=0.1, K=2, p=1.0, inner=profile.inner,
                                      n_windows=profile.windows, seed=seed + 1)
    rep.passed = rep.passed and rep.details["windows"] >= profile.windows
    return rep


def check_tree_measure(profile: Profile, lln: LLNData) -> est.CheckReport:
    def capped_leaves(tree) -> float:
        return float(tree.leaf_count()) if tree.n <= 6 else 0.0

    rep = est.tree_profile_check(lln.ensemble, capped_leaves, lln.perron.pi, lln.T, 6)
    rep.name = "tree_measure"
    return rep


CHECKS: list = [
    (1, "gamma_equals_theta", check_gamma_equals_theta),
    (2, "variant_shifts", check_variant_shifts),
    (3, "homogeneity", check_homogeneity),
    (4, "eigen_residuals", check_residuals),
    (5, "critical_curve", check_critical_curve),
    (6, "theta_slope", check_theta_slope),
    (7, "beta_monotonicity", check_beta_monotonicity),
    (8, "splitting_law", check_splitting_law),
    (9, "cross_fidelity", check_cross_fidelity),
    (10, "malthusian_mc", check_malthusian_mc),
    (11, "lln_profiles", check_lln_profiles),
    (12, "martingale_kesten_stigum", check_martingale),
    (13, "second_moment", check_second_moment),
    (14, "coupling", check_coupling),
    (15, "growth_only_bounds", check_growth_only_bounds),
    (16, "tree_measure", check_tree_measure),
]

_NEEDS_LLN = {10, 11, 12, 16}


def run_suite(profile: str = "desk", only: Optional[list] = None,
              progress: Optional[Callable[[str], None]] = None) -> list:
    """Run the selected checks; returns (number, report) pairs in order."""
    prof = PROFILES[profile]
    lln = None
    out = []
    for number, name, fn in CHECKS:
        if only and number not in only:
            continue
        if number in _NEEDS_LLN and lln is None:
            lln = LLNData(prof)
        started = time.perf_counter()
        rep = fn(prof, lln) if number in _NEEDS_LLN else fn(prof)
        rep.details["seconds_total"] = time.perf_counter() - started
        rep.details["criterion"] = number
        out.append((number, rep))
        if progress is not None:
            progress(f"[{'PASS' if rep.passed else 'FAIL'}] {number:2d} {name}: "
                     f"statistic={rep.statistic!r} threshold={rep.threshold!r}")
    return out
