"""Acceptance criteria at their stated tolerances and sample sizes.

Each test prints one pass/fail line (collected in the terminal summary) and
re-asserts its thresholds on the raw numbers returned by ``gfi.verify``.
"""

import math

import pytest

from gfi import verify

from conftest import ACCEPTANCE_LINES

FULL = verify.PROFILES["full"]


def record(number, ok, text):
    tag = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES.append(f"criterion {number:2d}: {tag}  {text}")
    print(ACCEPTANCE_LINES[-1])
    return ok


@pytest.fixture(scope="module")
def lln():
    return verify.LLNData(FULL)


def test_criterion_01_equal_rates_anchor():
    d = verify.check_gamma_equals_theta(FULL).details
    ok = abs(d["lambda"] + 1) < 1e-6 and d["h_relative_spread"] < 1e-6 and d["seconds"] < 10
    assert record(1, ok, f"lambda={d['lambda']:.12f} h spread={d['h_relative_spread']:.2e} "
                         f"time={d['seconds']:.2f}s")


def test_criterion_02_variant_shifts():
    rows = verify.check_variant_shifts(FULL).details["rows"]
    mod = max(r["modified_minus_lambda_plus_theta"] for r in rows)
    vr = max(r["vertex_removal_shift_error"] for r in rows)
    vec = max(max(r["pi_diff"], r["h_diff"]) for r in rows)
    ok = mod < 1e-8 and vr < 1e-8 and vec < 1e-8
    assert record(2, ok, f"|mod - (lambda+theta)|={mod:.1e} |vr - (lambda-gamma)|={vr:.1e} "
                         f"pi/h diff={vec:.1e}")


@pytest.mark.xfail(strict=True, reason="the per-edge isolation generator is L + theta*I, so the "
                                       "literal 'lambda - theta' shift cannot hold")
def test_criterion_02_literal_minus_theta_sign():
    d = verify.check_variant_shifts(FULL).details
    err = d["literal_minus_theta_error"]
    record(2, err < 1e-8, f"literal form |mod - (lambda-theta)|={err:.3f} (sign discrepancy, "
                          f"see notes)")
    assert err < 1e-8


def test_criterion_03_homogeneity():
    rows = verify.check_homogeneity(FULL).details["rows"]
    worst = max(r["error"] for r in rows)
    assert len(rows) == 10
    assert record(3, worst < 1e-6, f"max |lambda(2p) - 2 lambda(p)|={worst:.1e} over 10 points")


def test_criterion_04_eigen_residuals():
    rows = verify.check_residuals(FULL).details["rows"]
    left = max(r["left"] for r in rows)
    right = max(r["right"] for r in rows)
    ok = left < 1e-8 and right < 1e-8
    assert record(4, ok, f"max left L1={left:.1e} max right sup={right:.1e} "
                         f"over {len(rows)} (point, variant) pairs")


def test_criterion_05_critical_curve():
    rows = verify.check_critical_curve(FULL).details["rows"]
    inside = all(r["lower"] <= r["gamma_c"] <= r["upper"] for r in rows)
    increasing = all(a["gamma_c"] < b["gamma_c"] for a, b in zip(rows, rows[1:]))
    worst = max(abs(r["lambda"]) for r in rows)
    ok = inside and increasing and worst < 1e-6 and len(rows) == 9
    gammas = ", ".join(f"{r['gamma_c']:.4f}" for r in rows)
    assert record(5, ok, f"inside={inside} increasing={increasing} max|lambda|={worst:.1e} "
                         f"gamma_c=[{gammas}]")


def test_criterion_06_theta_slope():
    rows = verify.check_theta_slope(FULL).details["rows"]
    worst = max(r["excess"] for r in rows)
    assert {r["delta"] for r in rows} == {0.1, 0.5}
    assert record(6, worst <= 1e-6, f"max lambda(theta+d) - (lambda(theta) - d)={worst:.4f} "
                                    f"over {len(rows)} comparisons")


def test_criterion_07_beta_monotonicity():
    s = verify.check_beta_monotonicity(FULL).details["series"]
    up, down, flat = s["1.0,2.0"], s["2.0,1.0"], s["1.0,1.0"]
    ok = (all(b - a > 1e-6 for a, b in zip(up, up[1:]))
          and all(a - b > 1e-6 for a, b in zip(down, down[1:]))
          and all(abs(v + 1.0) < 1e-6 for v in flat))
    fmt = lambda xs: "[" + ", ".join(f"{x:.4f}" for x in xs) + "]"
    assert record(7, ok, f"(1,2) {fmt(up)} (2,1) {fmt(down)} (1,1) {fmt(flat)}")


def test_criterion_08_splitting_law():
    d = verify.check_splitting_law(FULL).details
    sizes = [r for r in d["rows"] if r["test"] == "detached size"]
    parts = [r for r in d["rows"] if r["test"] == "part classes"]
    assert [r["n"] for r in sizes] == [3, 5, 8] and max(r["n"] for r in parts) == 6
    p_min = min(r["p"] for r in d["rows"])
    ok = p_min > 0.001 and d["exhaustive_law_matches"]
    assert record(8, ok, f"min p={p_min:.3f} over sizes 3,5,8 and part classes n<=6; "
                         f"exhaustive law exact={d['exhaustive_law_matches']}")


def test_criterion_09_cross_fidelity():
    rep = verify.check_cross_fidelity(FULL)
    d = rep.details
    p_min = min(d["p_joint"], d["p_count"], d["p_mass"])
    ok = p_min > 0.01 and d["seconds"] < 120
    assert record(9, ok, f"t={d['time']} mean counts {d['mean_count_tree']:.2f}/"
                         f"{d['mean_count_size']:.2f} p(joint,count,mass)=({d['p_joint']:.3f}, "
                         f"{d['p_count']:.3f}, {d['p_mass']:.3f}) time={d['seconds']:.1f}s")


def test_criterion_10_malthusian_mc(lln):
    d = verify.check_malthusian_mc(FULL, lln).details
    sup, sub = d["supercritical"], d["subcritical"]
    z_sup = abs(sup["mc"] - sup["spectral"]) / sup["se"]
    z_sub = abs(sub["mc"] - sub["spectral"]) / sub["se"]
    ok = z_sup < 3 and z_sub < 3
    assert record(10, ok, f"super {sup['mc']:.4f}+-{sup['se']:.4f} vs {sup['spectral']:.4f}; "
                          f"sub (isolations) {sub['mc']:.4f}+-{sub['se']:.4f} vs "
                          f"{sub['spectral']:.4f}")


def test_criterion_11_lln_profiles(lln):
    d = verify.check_lln_profiles(FULL, lln).details
    act, ina = d["active"]["distance"], d["inactive"]["distance"]
    assert math.exp(lln.perron.lam * lln.T) == pytest.approx(1000, rel=1e-3)
    assert lln.ensemble.n_replicas == 1000
    ok = act < 0.05 and ina < 0.05
    assert record(11, ok, f"T={lln.T} active TV={act:.4f} inactive TV={ina:.4f} "
                          f"survivors={d['active']['n_survivors']}")


def test_criterion_12_martingale(lln):
    d = verify.check_martingale(FULL, lln).details
    nonzero = [t for t in lln.times if t > 0]
    assert len(nonzero) == 10
    ok = d["max_z"] < 3 and d["off_diagonal"] < 0.02
    assert record(12, ok, f"max |mean - h(1)|/se={d['max_z']:.2f} "
                          f"off-diagonal fraction={d['off_diagonal']:.4f}")


def test_criterion_13_second_moment():
    rows = verify.check_second_moment(FULL).details["rows"]
    ok = len(rows) == 2 and all(abs(r["mc"] - r["spectral"]) < 3 * r["se"] for r in rows)
    text = "; ".join(f"t={r['time']}: {r['mc']:.4f}+-{r['se']:.4f} vs {r['spectral']:.4f}"
                     for r in rows)
    assert record(13, ok, text)


def test_criterion_14_coupling():
    d = verify.check_coupling(FULL).details
    ks = min(r["ks_p"] for r in d["marginals"])
    ok = (d["branch_violations"] == 0 and d["pair_violations"] == 0
          and d["branches"] >= 100_000 and d["pairs"] >= 1000
          and ks > 0.01 and d["split_p"] > 0.01 and min(d["time_change_p"]) > 0.01
          and d["min_end_size_p"] > d["end_size_level"])
    assert record(14, ok, f"violations {d['branch_violations']}/{d['branches']} branches, "
                          f"{d['pair_violations']}/{d['pairs']} pairs; min marginal KS p={ks:.3f} "
                          f"time-change p={min(d['time_change_p']):.3f}")


def test_criterion_15_growth_only_bounds():
    d = verify.check_growth_only_bounds(FULL).details
    ok = d["windows"] >= 1000 and d["mean_violations"] == 0 and d["variance_violations"] == 0
    assert record(15, ok, f"{d['windows']} windows, violations mean={d['mean_violations']} "
                          f"var={d['variance_violations']}, max ratios "
                          f"{d['max_mean_ratio']:.2f}/{d['max_var_ratio']:.2f}")


def test_criterion_16_tree_measure(lln):
    rep = verify.check_tree_measure(FULL, lln)
    d = rep.details
    lo, hi = rep.ci
    ok = lo <= d["predicted"] <= hi and d["time"] == lln.T
    assert record(16, ok, f"empirical {d['empirical']:.5f} CI [{lo:.5f}, {hi:.5f}] "
                          f"predicted {d['predicted']:.5f}")
