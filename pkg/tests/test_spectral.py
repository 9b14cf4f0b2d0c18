import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from gfi import spectral
from gfi.params import Params, ValidationError
from gfi.rrt import split_size_law


def test_generator_entries_small_truncation():
    p = Params(1.5, 0.4, 2.0)
    L = spectral.build_generator(p, 4).matrix
    for n in range(1, 5):
        out = -(1.5 * n + 0.4 * n + 2.0 * (n - 1))
        assert L[n - 1, n - 1] == pytest.approx(out)
        if n < 4:
            assert L[n - 1, n] == pytest.approx(1.5 * n)
        for m in range(1, n):
            # either part has size m: rate gamma(n-1) times P(j=m) + P(j=n-m)
            gain = 2.0 * (n - 1) * (split_size_law(n, m) + split_size_law(n, n - m))
            assert L[n - 1, m - 1] == pytest.approx(gain)


def test_modified_and_vertex_removal_diagonals():
    p = Params(1.0, 0.5, 2.0)
    n = np.arange(1, 6)
    std = np.diag(spectral.build_generator(p, 5).matrix)
    mod = np.diag(spectral.build_generator(p, 5, "modified").matrix)
    vr = np.diag(spectral.build_generator(p, 5, "vertex-removal").matrix)
    assert np.allclose(mod - std, 0.5)
    assert np.allclose(vr - std, -2.0)
    assert np.allclose(std, -(n + 0.5 * n + 2.0 * (n - 1)))


def test_evolve_matches_matrix_exponential():
    gen = spectral.build_generator(Params(1.0, 0.3, 1.2), 40)
    t = 1.3
    exact = spectral.delta(2, 40) @ expm(gen.matrix * t)
    assert np.allclose(spectral.evolve(spectral.delta(2, 40), gen, t), exact, atol=1e-9)
    f = np.arange(1, 41, dtype=float)
    assert np.allclose(spectral.evolve_function(f, gen, t), expm(gen.matrix * t) @ f, rtol=1e-8)


def test_yule_moments():
    # growth only: size from 1 is geometric with success probability e^{-t}
    gen = spectral.build_generator(Params.growth_only(1.0), 256)
    t = 1.0
    p = math.exp(-t)
    mean = spectral.evolve(spectral.delta(1, 256), gen, t) @ np.arange(1, 257)
    assert mean == pytest.approx(1 / p, rel=1e-8)
    second, err = spectral.second_moment(lambda n: n, t, 1, gen)
    assert second == pytest.approx((2 - p) / p ** 2, rel=1e-7)


def test_fragmentation_only_counts():
    # from size 2 the single edge breaks at rate gamma
    gen = spectral.build_generator(Params(0.0, 0.0, 1.5), 8)
    for t in (0.2, 1.0, 3.0):
        assert spectral.mean_active_count(gen, t, x=2) == pytest.approx(2 - math.exp(-1.5 * t),
                                                                        rel=1e-9)


def test_isolation_only_counts():
    gen = spectral.build_generator(Params(0.0, 0.7, 0.0), 4)
    t = 2.0
    assert spectral.mean_active_count(gen, t) == pytest.approx(math.exp(-0.7 * t), rel=1e-9)
    value, err = spectral.mean_inactive_count(gen, t)
    assert value == pytest.approx(1 - math.exp(-0.7 * t), abs=1e-6)


@pytest.mark.parametrize("beta,theta", [(1.0, 1.0), (2.0, 0.5), (0.5, 3.0)])
def test_equal_isolation_and_fragmentation(beta, theta):
    triple = spectral.perron_triple(Params(beta, theta, theta), 256)
    assert triple.lam == pytest.approx(-theta, abs=1e-8)
    # the truncation perturbs h in a boundary layer below N; compare away from it
    bulk = triple.h[: triple.N // 4]
    assert np.ptp(bulk) < 1e-8 * abs(bulk.mean())


def test_perron_triple_normalisation_and_residuals():
    tr = spectral.perron_triple(Params(1.0, 0.1, 1.0), 256)
    assert tr.pi.sum() == pytest.approx(1.0)
    assert np.all(tr.pi >= 0) and np.all(tr.h > 0)
    assert tr.pi @ tr.h == pytest.approx(1.0)
    assert tr.diagnostics["left_residual_l1"] < 1e-8
    assert tr.diagnostics["right_residual_sup"] < 1e-8


def test_lambda_matches_growth_rate_of_semigroup():
    p = Params(1.0, 0.3, 1.0)
    lam, _ = spectral.malthusian_exponent(p)
    gen = spectral.build_generator(p, 256)
    slope = math.log(spectral.mean_active_count(gen, 12.0) / spectral.mean_active_count(gen, 8.0)) / 4
    assert slope == pytest.approx(lam, abs=1e-3)


@settings(max_examples=8)
@given(st.floats(0.3, 3.0), st.floats(0.1, 2.0), st.floats(0.1, 3.0), st.floats(0.5, 3.0))
def test_homogeneity(beta, theta, gamma, rho):
    p = Params(beta, theta, gamma)
    lam, _ = spectral.malthusian_exponent(p, cross_check=False)
    lam_s, _ = spectral.malthusian_exponent(p.scaled(rho), cross_check=False)
    assert lam_s == pytest.approx(rho * lam, abs=1e-6 * max(1.0, rho))


@settings(max_examples=8)
@given(st.floats(0.3, 3.0), st.floats(0.1, 2.0), st.floats(0.1, 3.0), st.floats(0.05, 1.0))
def test_monotone_in_theta_and_gamma(beta, theta, gamma, d):
    lam = spectral.malthusian_exponent(Params(beta, theta, gamma), cross_check=False)[0]
    more_theta = spectral.malthusian_exponent(Params(beta, theta + d, gamma), cross_check=False)[0]
    more_gamma = spectral.malthusian_exponent(Params(beta, theta, gamma + d), cross_check=False)[0]
    assert more_theta <= lam - d + 1e-6
    assert more_gamma >= lam - 1e-6


def test_variant_shifts():
    p = Params(1.0, 0.4, 1.3)
    std = spectral.perron_triple(p, 256)
    mod = spectral.perron_triple(p, 256, variant="modified")
    vr = spectral.perron_triple(p, 256, variant="vertex-removal")
    assert mod.lam == pytest.approx(std.lam + 0.4, abs=1e-9)
    assert vr.lam == pytest.approx(std.lam - 1.3, abs=1e-9)
    assert np.allclose(mod.pi, std.pi, atol=1e-10) and np.allclose(vr.h, std.h, atol=1e-10)


def test_critical_gamma():
    g, info = spectral.critical_gamma(1.0, 0.5)
    lo, hi = spectral.critical_bracket(1.0, 0.5)
    assert lo <= g <= hi
    assert abs(spectral.malthusian_exponent(Params(1.0, 0.5, g))[0]) < 1e-6
    with pytest.raises(ValidationError):
        spectral.critical_gamma(1.0, 1.0)


def test_phase_surface_flags():
    surface = spectral.phase_surface(1.0, [0.2, 0.5], [0.5, 1.0, 2.0])
    assert surface.flags == {"nonincreasing_in_theta": True, "nondecreasing_in_gamma": True,
                             "all_converged": True}
    assert len(surface.table()) == 6


@pytest.mark.parametrize("rates", [(1.0, 0.3, 1.0), (1.0, 1.0, 0.5), (2.0, 1.0, 1.0)])
def test_lyapunov_witness(rates):
    w = spectral.lyapunov_witness(Params(*rates), N=200)
    assert w.verified, w.checks
    assert w.a < w.b


def test_geometric_split_sum_series():
    for q in (0.1, 0.5, 0.9):
        series = sum(q ** (j - 1) / (j * (j + 1)) for j in range(1, 5000))
        assert spectral.geometric_split_sum(q) == pytest.approx(series, rel=1e-10)


def test_size_biased():
    assert np.allclose(spectral.size_biased([0.5, 0.5]), [1 / 3, 2 / 3])
    with pytest.raises(ValidationError):
        spectral.size_biased([-1.0, 2.0])


def test_truncation_validation():
    with pytest.raises(ValidationError):
        spectral.build_generator(Params(1, 1, 1), 1)
