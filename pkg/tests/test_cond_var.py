import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from letf_lab.cond_var import (
    CondVarCurve,
    ConstantVariance,
    analytic_conditional_iv,
    bin_edges,
    equidistant_lm_grid,
    integrated_var_cf_given_endpoints,
    integrated_var_density_given_endpoints,
    mc_conditional_iv,
    noncentral_chi2_pdf,
    smooth_curve,
    transition_scale,
    variance_transition_pdf,
)
from letf_lab.heston import CarryTerms, HestonParams, PathSample, PathSamples, simulate_euler


def _two_paths():
    return PathSamples.from_samples([PathSample(90.0, 0.03, 0.04), PathSample(110.0, 0.05, 0.04)], ttm=0.5)


def test_hand_built_paths():
    grid = np.log(np.array([95.0, 105.0]) / 100.0)
    curve = mc_conditional_iv(_two_paths(), 100.0, grid)
    np.testing.assert_allclose(curve.values, [0.03, 0.05])
    assert list(curve.bin_counts) == [1, 1]
    np.testing.assert_allclose(bin_edges(100.0, grid), [90.0, 100.0, 110.0])


def test_bins_are_half_open_on_the_left():
    grid = np.log(np.array([95.0, 105.0]) / 100.0)
    paths = PathSamples.from_samples([PathSample(100.0, 0.07, 0.04), PathSample(90.0, 0.01, 0.04),
                                      PathSample(110.0, 0.02, 0.04)], ttm=0.5)
    curve = mc_conditional_iv(paths, 100.0, grid)
    np.testing.assert_allclose(curve.values, [0.04, 0.02])


def test_single_bin_flags_the_rest_empty():
    grid = equidistant_lm_grid(100.0, -0.2, 0.2, 5)
    paths = PathSamples.from_samples([PathSample(100.0, 0.02, 0.04)] * 3, ttm=0.5)
    curve = mc_conditional_iv(paths, 100.0, grid)
    assert curve.empty.sum() == 4
    assert curve.mean_value() == pytest.approx(0.02)
    with pytest.raises(ValueError):
        mc_conditional_iv(PathSamples.from_samples([], ttm=0.5), 100.0, grid)


def test_constant_variance_paths():
    p = HestonParams(2.0, 0.04, 0.0, 0.04, 0.0)
    paths = simulate_euler(p, CarryTerms(), 100.0, 0.5, 40, 20000, seed=2)
    curve = mc_conditional_iv(paths, 100.0, equidistant_lm_grid(100.0, -0.3, 0.3, 11))
    ok = ~curve.empty
    np.testing.assert_allclose(curve.values[ok], 0.02, rtol=1e-13)


def test_merged_bins_and_order_invariance(desk_params):
    paths = simulate_euler(desk_params, CarryTerms(), 100.0, 0.5, 50, 20000, seed=4)
    grid = equidistant_lm_grid(100.0, -0.3, 0.3, 12)
    fine = mc_conditional_iv(paths, 100.0, grid)
    perm = np.random.default_rng(0).permutation(len(paths))
    shuffled = PathSamples(paths.terminal_price[perm], paths.integrated_variance[perm],
                           paths.terminal_variance[perm], paths.ttm, paths.n_steps)
    again = mc_conditional_iv(shuffled, 100.0, grid)
    np.testing.assert_allclose(again.values, fine.values, rtol=1e-12)
    assert np.array_equal(again.bin_counts, fine.bin_counts)
    coarse = mc_conditional_iv(paths, 100.0, np.log(np.exp(grid[::2]) / 2 + np.exp(grid[1::2]) / 2))
    for j in range(6):
        c = fine.bin_counts[2 * j:2 * j + 2]
        v = fine.values[2 * j:2 * j + 2]
        if c.sum():
            assert coarse.bin_counts[j] == c.sum()
            assert coarse.values[j] == pytest.approx(np.nansum(v * c) / c.sum(), rel=1e-12)


def test_grid_must_be_equidistant_in_price():
    with pytest.raises(ValueError):
        bin_edges(100.0, np.linspace(-0.3, 0.3, 5))


def test_curve_invariants_and_csv(tmp_path):
    with pytest.raises(ValueError):
        CondVarCurve(0.5, [0.1, 0.0], [0.02, 0.02], [1, 1])
    with pytest.raises(ValueError):
        CondVarCurve(0.5, [0.0, 0.1], [-0.02, 0.02], [1, 1])
    c = CondVarCurve(0.5, [-0.1, 0.0, 0.1], [0.02, np.nan, 0.03], [4, 0, 2])
    val, flag = c.lookup([-0.2, 0.0, 0.05])
    np.testing.assert_allclose(val, [0.02, 0.025, 0.0275])
    assert list(flag) == [True, False, False]
    c.write_csv(tmp_path / "c.csv", ["seed=1"])
    back = CondVarCurve.read_csv(tmp_path / "c.csv")
    assert back.ttm == 0.5 and np.array_equal(back.bin_counts, c.bin_counts)
    np.testing.assert_array_equal(back.empty, c.empty)
    cv = ConstantVariance(0.04, 0.5)
    assert cv.mean_value() == 0.02 and cv.lookup(0.3)[0] == 0.02


def test_smooth_curve_reproduces_polynomials():
    lm = np.linspace(-0.3, 0.3, 9)
    quad = 0.02 - 0.01 * lm + 0.05 * lm ** 2
    c = CondVarCurve(0.5, lm, quad, np.ones(9, int))
    np.testing.assert_allclose(smooth_curve(c, 2).values, quad, atol=1e-10)
    const = CondVarCurve(0.5, lm, np.full(9, 0.03), np.ones(9, int))
    np.testing.assert_allclose(smooth_curve(const, 4).values, 0.03, atol=1e-12)
    with pytest.raises(ValueError):
        smooth_curve(CondVarCurve(0.5, lm[:2], quad[:2], [1, 1]), 2)


def test_smooth_curve_noisy_quadratic_recovery():
    rng = np.random.default_rng(3)
    lm = np.linspace(-0.4, 0.4, 41)
    beta = np.array([0.02, -0.01, 0.05])
    y = beta[0] + beta[1] * lm + beta[2] * lm ** 2 + 1e-4 * rng.standard_normal(41)
    c = CondVarCurve(0.5, lm, y, np.ones(41, int))
    fit = smooth_curve(c, 2).values
    X = np.vander(lm, 3, increasing=True)
    est = np.linalg.lstsq(X, fit, rcond=None)[0]
    se = 1e-4 * np.sqrt(np.diag(np.linalg.inv(X.T @ X)))
    assert np.all(np.abs(est - beta) < 3 * se)


def test_smoothing_clamps_at_zero():
    lm = np.linspace(-1, 1, 5)
    c = CondVarCurve(0.5, lm, [0.0, 0.0, 0.0, 0.0, 1.0], np.ones(5, int))
    assert smooth_curve(c, 1).values.min() == 0.0


def test_noncentral_chi2_pdf():
    assert noncentral_chi2_pdf(1.0, 2.0, 0.0) == pytest.approx(0.5 * math.exp(-0.5), rel=1e-12)
    mass = integrate.quad(lambda x: noncentral_chi2_pdf(x, 3.0, 5.0), 0, 200, limit=200)[0]
    assert mass == pytest.approx(1.0, abs=1e-6)
    mean = integrate.quad(lambda x: x * noncentral_chi2_pdf(x, 2.0, 1.0), 0, np.inf, limit=200)[0]
    assert mean == pytest.approx(3.0, abs=1e-4)
    x = np.linspace(0.1, 30, 25)
    np.testing.assert_allclose(noncentral_chi2_pdf(x, 4.5, 2.3), stats.ncx2.pdf(x, 4.5, 2.3), rtol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.3, 20.0), st.one_of(st.just(0.0), st.floats(1e-10, 50.0)), st.floats(0.01, 60.0))
def test_noncentral_chi2_matches_scipy(dof, lam, x):
    expected = stats.ncx2.pdf(x, dof, lam) if lam > 0 else stats.chi2.pdf(x, dof)
    got = noncentral_chi2_pdf(x, dof, lam)
    assert got >= 0
    assert got == pytest.approx(expected, rel=1e-7, abs=1e-300)


def test_noncentral_chi2_tiny_noncentrality():
    x = np.array([0.5, 1.0, 4.0])
    np.testing.assert_allclose(noncentral_chi2_pdf(x, 1.0, 5e-324), stats.chi2.pdf(x, 1.0), rtol=1e-12)


def test_transition_density(desk_params):
    p = HestonParams(2.0, 0.04, 0.3, 0.04, -0.5)
    mass = integrate.quad(lambda v: variance_transition_pdf(v, 0.04, p, 1.0), 0, 1.0, limit=200, points=[0.04])[0]
    assert mass == pytest.approx(1.0, abs=1e-5)
    scale, dof, lam = transition_scale(p, 1.0)
    v = np.linspace(0.005, 0.15, 30)
    np.testing.assert_allclose(variance_transition_pdf(v, 0.04, p, 1.0),
                               noncentral_chi2_pdf(v / scale, dof, lam) / scale, rtol=1e-8)


def test_integrated_var_cf_basics(desk_params):
    v0, vt = 0.04, 0.05
    assert integrated_var_cf_given_endpoints(0.0, v0, vt, desk_params, 0.5) == pytest.approx(1 + 0j, abs=1e-12)
    a = integrated_var_cf_given_endpoints(1.0, v0, vt, desk_params, 0.5)
    b = integrated_var_cf_given_endpoints(-1.0, v0, vt, desk_params, 0.5)
    assert b == pytest.approx(np.conj(a), abs=1e-12)
    w = np.linspace(-200, 200, 41)
    assert np.all(np.abs(integrated_var_cf_given_endpoints(w, v0, vt, desk_params, 0.5)) <= 1 + 1e-12)
    with pytest.raises(ValueError):
        integrated_var_cf_given_endpoints(1.0, 0.0, vt, desk_params, 0.5)


def test_integrated_var_density_normalizes(desk_params):
    grid = np.linspace(1e-4, 0.08, 800)
    f = integrated_var_density_given_endpoints(grid, 0.04, 0.04, desk_params, 0.5)
    assert integrate.trapezoid(f, grid) == pytest.approx(1.0, abs=1e-3)
    # mean close to deterministic flow between equal endpoints
    assert integrate.trapezoid(grid * f, grid) == pytest.approx(0.02, rel=0.05)


def test_analytic_degenerate_limit():
    p = HestonParams(2.0, 0.04, 1e-6, 0.04, -0.5)
    assert analytic_conditional_iv(0.0, p, CarryTerms(), 100.0, 0.5) == pytest.approx(0.02, abs=1e-3)
