import math

import numpy as np
import pytest

from gfi import estimators as est, spectral
from gfi.params import Params, ValidationError
from gfi.rrt import RecursiveTree

SUPER = Params(1.0, 0.1, 1.0)


@pytest.fixture(scope="module")
def perron():
    return spectral.perron_triple(SUPER, 256)


@pytest.fixture(scope="module")
def tree_ensemble():
    return est.run_ensemble(SUPER, [0.0, 2.0, 4.0, 6.0], 400, 21, fidelity="tree",
                            tree_times=[6.0], tree_cap=5)


def test_ensemble_is_seed_deterministic_and_worker_independent():
    a = est.run_ensemble(SUPER, [1.0, 2.0], 40, 3)
    b = est.run_ensemble(SUPER, [1.0, 2.0], 40, 3, workers=2)
    assert a.active == b.active and a.inactive == b.inactive
    assert a.param_hash() == b.param_hash()


def test_ensemble_validation():
    with pytest.raises(ValidationError):
        est.run_ensemble(SUPER, [1.0], 5, 0, fidelity="exact")
    with pytest.raises(ValidationError):
        est.run_ensemble(SUPER, [1.0], 5, 0, tree_times=[1.0])
    with pytest.raises(ValidationError):
        est.run_ensemble(SUPER, [1.0], 5, 0, fidelity="tree", tree_times=[0.5])
    ens = est.run_ensemble(SUPER, [1.0], 5, 0)
    with pytest.raises(ValidationError):
        ens.time_index(0.7)


def test_initial_histogram_respected():
    ens = est.run_ensemble(SUPER, [0.0], 3, 0, initial={2: 3, 1: 1})
    assert ens.active[0][0] == {1: 1, 2: 3}


def test_mc_lambda_recovers_exact_rate():
    # gamma = theta gives lambda = -theta exactly
    params = Params(1.0, 0.5, 0.5)
    ens = est.run_ensemble(params, [0.5 * k for k in range(11)], 8000, 5)
    fit = est.mc_lambda(ens, (0.0, 5.0), "clusters")
    assert abs(fit.lam + 0.5) < 4 * fit.se
    inc = est.mc_lambda(ens, (1.0, 4.5), "isolations")
    assert abs(inc.lam + 0.5) < 4 * inc.se


def test_mc_lambda_rejects_bad_input():
    ens = est.run_ensemble(SUPER, [0.0, 1.0], 10, 0)
    with pytest.raises(ValidationError):
        est.mc_lambda(ens, observable="mass")
    with pytest.raises(est.EstimationError):
        est.mc_lambda(ens, (0.0, 0.0))


def test_profile_distance_is_censored_without_survivors(perron):
    ens = est.run_ensemble(Params(0.1, 5.0, 0.1), [0.0, 20.0], 20, 0)
    out = est.active_profile_distance(ens, perron.pi, 20.0, n_boot=20)
    assert out.censored and math.isnan(out.distance)


def test_profile_distance_small_for_large_populations(tree_ensemble, perron):
    act = est.active_profile_distance(tree_ensemble, perron.pi, 6.0, n_boot=50)
    ina = est.inactive_profile_distance(tree_ensemble, perron.pi, 6.0, n_boot=50)
    assert act.distance < 0.05 and ina.distance < 0.08


def test_tree_functional_expectation_leaves():
    # leaves average n/2 (n >= 2) and 1 for a single vertex
    pi = np.array([0.2, 0.3, 0.5])
    out = est.tree_functional_expectation(lambda t: t.leaf_count(), pi, 3)
    assert out.value == pytest.approx(0.2 * 1 + 0.3 * 1 + 0.5 * 1.5)
    with pytest.raises(est.EstimationError):
        est.tree_functional_expectation(lambda t: 1.0, np.full(20, 0.05), 3)


def test_tree_classes_uniform_in_ensemble(tree_ensemble):
    stat, dof, p = est.tree_class_uniformity(tree_ensemble, 4, 6.0)
    assert dof == 5 and p > 0.001


def test_tree_profile_check(tree_ensemble, perron):
    rep = est.tree_profile_check(tree_ensemble, lambda t: float(t.leaf_count()), perron.pi, 6.0, 5)
    assert rep.details["survivors"] > 0
    assert rep.passed, rep.details
    with pytest.raises(ValidationError):
        est.tree_profile_check(tree_ensemble, lambda t: 1.0, perron.pi, 4.0, 5)


def test_martingale_is_flat(tree_ensemble, perron):
    mart = est.martingale_paths(tree_ensemble, perron)
    flat = mart.flatness()
    assert mart.initial_value == pytest.approx(perron.h[0])
    assert flat["max_z"] < 3.5
    assert flat["means"][0] == pytest.approx(perron.h[0])


def test_kesten_stigum_needs_supercritical(tree_ensemble):
    sub = spectral.perron_triple(Params(1.0, 1.0, 1.0), 64)
    with pytest.raises(ValidationError):
        est.kesten_stigum_check(tree_ensemble, sub)


def test_moment_bound(tree_ensemble):
    rep = est.moment_bound_check(tree_ensemble, 2.0, 4.0)
    assert rep.passed and rep.details["mean"] < rep.details["bound"]


def test_growth_only_window_bounds():
    ens = est.run_ensemble(SUPER, [1.0, 2.0], 30, 8)
    rep = est.growth_only_bound_check(ens, 0.1, 2, 1.0, inner=100, n_windows=40, seed=1)
    assert rep.passed, rep.details
    assert rep.details["max_mean_ratio"] < 1.0


def test_second_moment_estimate():
    ens = est.run_ensemble(SUPER, [1.0], 20000, 13)
    mc, se = est.second_moment_mc(ens, lambda n: 1.0, 1.0)
    exact, _ = spectral.second_moment(1.0, 1.0, 1, spectral.build_generator(SUPER, 256))
    assert abs(mc - exact) < 4 * se


def test_cross_fidelity_agrees():
    tree = est.run_ensemble(SUPER, [3.0], 1500, 1, fidelity="tree")
    size = est.run_ensemble(SUPER, [3.0], 1500, 2)
    assert est.cross_fidelity_check(tree, size, 3.0, alpha=0.001).passed


def test_check_report_serialises():
    rep = est.CheckReport("x", np.float64(1.5), 2.0, True, details={"arr": np.arange(2)})
    d = rep.to_dict()
    assert d["pass"] is True and d["details"]["arr"] == [0, 1]
    assert isinstance(d["statistic"], float)
