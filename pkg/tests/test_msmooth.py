import numpy as np
import pytest

from letf_lab.msmooth import (
    SmootherConfig,
    UniformBand,
    bands_disjoint,
    centered_residuals,
    conditional_edf_weights,
    cv_bandwidth,
    cv_scores,
    draw_residuals,
    fit_llm,
    huber_psi,
    kernel_weights,
    local_linear_ls,
    local_linear_m,
    oversmoothing_bandwidth,
    uniform_band,
)

GRID = tuple(np.linspace(0.1, 0.9, 17))


def _sine(n, seed, sd=0.1):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, n))
    return x, np.sin(2 * np.pi * x) + sd * rng.standard_normal(n)


def test_config_validation():
    with pytest.raises(ValueError):
        SmootherConfig(kernel="box")
    with pytest.raises(ValueError):
        SmootherConfig(h=0.0)
    with pytest.raises(ValueError):
        SmootherConfig(support_trim=0.5)
    with pytest.raises(ValueError):
        fit_llm(np.arange(5.0), np.arange(5.0), SmootherConfig(h=0.1))


@pytest.mark.parametrize("kern", ["gaussian", "quartic"])
def test_affine_and_constant_reproduced(kern):
    x = np.linspace(0, 1, 40)
    cfg = SmootherConfig(kernel=kern, h=0.15, huber_c=1e6, eval_grid=GRID)
    np.testing.assert_allclose(fit_llm(x, 0.3 - 1.7 * x, cfg).fit, 0.3 - 1.7 * np.array(GRID), atol=1e-8)
    np.testing.assert_allclose(fit_llm(x, np.full(40, 0.25), SmootherConfig(kernel=kern, h=0.15,
                                                                            eval_grid=GRID)).fit, 0.25, atol=1e-10)


def test_solution_satisfies_estimating_equations():
    x, y = _sine(80, 1)
    h, c = 0.08, 0.1
    grid = np.array(GRID)
    a, b, flagged, _ = local_linear_m(x, y, grid, h, c)
    assert not flagged.any()
    k = kernel_weights(grid, x, h)
    u = x[None, :] - grid[:, None]
    psi = huber_psi(y[None, :] - a[:, None] - b[:, None] * u, c)
    assert np.max(np.abs((k * psi).sum(1))) < 1e-9 * k.sum(1).max()
    assert np.max(np.abs((k * psi * u).sum(1))) < 1e-9 * k.sum(1).max()


def test_outlier_resistance_against_least_squares():
    rng = np.random.default_rng(2)
    x = np.linspace(0, 1, 61)
    y = 0.2 + 0.1 * x + 0.01 * rng.standard_normal(61)
    y_out = y.copy()
    y_out[30] += 5.0
    cfg = SmootherConfig(h=0.08, eval_grid=(x[30],))
    robust = fit_llm(x, y_out, cfg).fit[0] - fit_llm(x, y, cfg).fit[0]
    ls = local_linear_ls(x, y_out, [x[30]], 0.08)[0] - local_linear_ls(x, y, [x[30]], 0.08)[0]
    assert abs(robust) < 0.1 * abs(ls)


def test_empty_neighbourhood_flagged():
    x = np.concatenate([np.linspace(0, 0.2, 10), np.linspace(0.8, 1, 10)])
    fit = fit_llm(x, x, SmootherConfig(kernel="quartic", h=0.05, eval_grid=(0.1, 0.5, 0.9)))
    assert list(fit.flagged) == [False, True, False]


def test_cv_tie_break_and_argmin():
    x = np.linspace(0, 1, 30)
    cfg = SmootherConfig(huber_c=1.0)
    assert cv_bandwidth(x, 2 * x + 1, cfg, [0.3, 0.1, 0.2]) == 0.1
    xs, ys = _sine(100, 4)
    hs = [0.03, 0.05, 0.08, 0.12, 0.2]
    scores = cv_scores(xs, ys, SmootherConfig(), hs)
    assert np.all(np.isfinite(scores))
    assert cv_bandwidth(xs, ys, SmootherConfig(), hs) == hs[int(np.argmin(scores))]
    with pytest.raises(ValueError):
        cv_bandwidth(xs, ys, SmootherConfig(), [])


def test_cv_within_one_step_of_fine_grid():
    xs, ys = _sine(120, 5)
    coarse = np.geomspace(0.02, 0.3, 8)
    fine = np.geomspace(0.02, 0.3, 57)
    h_c = cv_bandwidth(xs, ys, SmootherConfig(), coarse)
    h_f = cv_bandwidth(xs, ys, SmootherConfig(), fine)
    step = coarse[1] / coarse[0]
    assert h_f / step <= h_c <= h_f * step


def test_conditional_edf_locality_and_centering():
    x = np.concatenate([np.linspace(0, 0.1, 10), np.linspace(5, 5.1, 10)])
    resid = np.random.default_rng(0).standard_normal(20)
    p = conditional_edf_weights(x, 0.05)
    assert p[:10, 10:].max() < 1e-12
    c = centered_residuals(resid, p)
    assert np.max(np.abs((p * c).sum(1))) < 1e-12
    draws = draw_residuals(resid, p, 200, np.random.default_rng(1))
    pool_a = set(np.round(c[0, :10], 12))
    assert set(np.round(draws[:, 0], 12)) <= pool_a


def test_noise_free_band_is_degenerate():
    x = np.linspace(0, 1, 40)
    cfg = SmootherConfig(h=0.1, eval_grid=GRID)
    with pytest.warns(RuntimeWarning):
        band = uniform_band(x, 1 + x, cfg, B=100)
    assert np.all(band.contains(band.fit))
    assert band.half_width.max() < 1e-6


def test_band_properties():
    x, y = _sine(80, 6)
    cfg = SmootherConfig(h=0.06, eval_grid=GRID)
    a = uniform_band(x, y, cfg, B=200, alpha=0.05, seed=3)
    b = uniform_band(x, y, cfg, B=200, alpha=0.05, seed=3)
    np.testing.assert_array_equal(a.lower, b.lower)
    np.testing.assert_allclose(a.upper - a.fit, a.fit - a.lower, atol=1e-12)
    assert np.all(a.lower <= a.fit) and np.all(a.fit <= a.upper)
    wide = uniform_band(x, y, cfg, B=200, alpha=0.01, seed=3)
    narrow = uniform_band(x, y, cfg, B=200, alpha=0.10, seed=3)
    assert wide.d_star >= a.d_star >= narrow.d_star
    assert np.all(wide.lower <= narrow.lower) and np.all(wide.upper >= narrow.upper)


def test_band_preconditions():
    x, y = _sine(40, 7)
    cfg = SmootherConfig(h=0.1, eval_grid=GRID)
    with pytest.raises(ValueError):
        uniform_band(x, y, cfg, B=50)
    with pytest.raises(ValueError):
        uniform_band(x, y, cfg, alpha=0.6)
    with pytest.raises(ValueError):
        uniform_band(x, y, cfg, g=0.05)
    assert oversmoothing_bandwidth(0.1, 1) == 0.1
    assert oversmoothing_bandwidth(0.1, 200) > 0.1


def _band(fit, half):
    grid = np.linspace(0, 1, len(fit))
    fit = np.asarray(fit, dtype=float)
    return UniformBand(grid, fit, fit - half, fit + half, 0.05, 1.0)


def test_bands_disjoint():
    a = _band(np.zeros(6), 1.0)
    same = bands_disjoint(a, a)
    assert not same.disjoint and np.allclose(same.overlap, 2.0)
    assert bands_disjoint(a, _band(np.full(6, 2.5), 0.4)).disjoint
    half = _band([0.5, 0.5, 0.5, 5, 5, 5], 1.0)
    prof = bands_disjoint(a, half)
    assert not prof.disjoint
    np.testing.assert_allclose(prof.overlap, [1.5, 1.5, 1.5, 0, 0, 0])
    with pytest.raises(ValueError):
        bands_disjoint(a, _band(np.zeros(5), 1.0))
