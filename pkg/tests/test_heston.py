import math
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from letf_lab import blackscholes
from letf_lab.heston import (
    CarryTerms,
    HestonParams,
    PathSample,
    PathSamples,
    calibrate,
    implied_vol_from_price,
    logprice_cf,
    mc_call_price,
    price_call,
    price_calls,
    simulate_euler,
)
from letf_lab.market_data import OptionQuote

FLAT = HestonParams(kappa=2.0, theta=0.04, sigma=1e-8, v0=0.04, rho=-0.5)


def test_params_validation():
    with pytest.raises(ValueError):
        HestonParams(0.0, 0.04, 0.3, 0.04, 0.0)
    with pytest.raises(ValueError):
        HestonParams(1.0, 0.04, 0.3, 0.04, 1.0)
    assert HestonParams.from_array(FLAT.as_array()) == FLAT


def test_cf_at_zero_and_conjugate_symmetry(desk_params):
    carry = CarryTerms(0.02, 0.01)
    assert logprice_cf(0.0, desk_params, carry, 100.0, 0.5) == pytest.approx(1.0 + 0j, abs=1e-15)
    for w in (0.5, 1.0, 5.0):
        a = logprice_cf(w, desk_params, carry, 100.0, 0.5)
        b = logprice_cf(-w, desk_params, carry, 100.0, 0.5)
        assert b == pytest.approx(np.conj(a), abs=1e-14)
        assert abs(a) <= 1.0 + 1e-14


def test_cf_degenerate_matches_lognormal():
    carry = CarryTerms(0.01, 0.0)
    s0, T = 100.0, 1.0
    w = np.array([0.3, 1.0, 2.5, 7.0])
    mean = math.log(s0) + (0.01 - 0.5 * 0.04) * T
    lognormal = np.exp(1j * w * mean - 0.5 * w * w * 0.04 * T)
    got = logprice_cf(w, FLAT, carry, s0, T)
    assert np.max(np.abs(got / lognormal - 1.0)) < 1e-4


def test_degenerate_price_is_black_scholes():
    price = price_call(FLAT, CarryTerms(), 100.0, 100.0, 1.0)
    assert price == pytest.approx(7.9656, rel=1e-3)
    assert price == pytest.approx(blackscholes.call_price(100.0, 100.0, 1.0, 0.0, 0.2), rel=1e-6)
    iv = implied_vol_from_price(price, 100.0, 100.0, 1.0, CarryTerms())
    assert iv == pytest.approx(0.2, abs=1e-3)


def test_deep_itm_limit(desk_params):
    carry = CarryTerms(0.02, 0.01)
    assert price_call(desk_params, carry, 100.0, 1e-6, 1.0) == pytest.approx(100.0 * math.exp(-0.01), abs=1e-4)


def test_price_bounds_monotone_convex(desk_params):
    carry = CarryTerms(0.03, 0.01)
    s0, T = 100.0, 0.75
    ks = [80.0, 90.0, 100.0, 110.0, 120.0]
    prices = [price_call(desk_params, carry, s0, k, T) for k in ks]
    for k, p in zip(ks, prices):
        lo, hi = blackscholes.price_bounds(s0, k, T, carry.r, carry.c)
        assert lo < p < hi
    assert all(a >= b for a, b in zip(prices, prices[1:]))
    parity = [p + k * math.exp(-carry.r * T) - s0 * math.exp(-carry.c * T) for k, p in zip(ks, prices)]
    assert all(b >= a - 1e-10 for a, b in zip(parity, parity[1:]))
    assert all(prices[i - 1] - 2 * prices[i] + prices[i + 1] >= -1e-10 for i in range(1, 4))


def test_vectorized_pricer_agrees_with_adaptive(desk_params):
    carry = CarryTerms(0.01, 0.005)
    ks = np.array([70.0, 95.0, 100.0, 130.0])
    ts = np.array([0.1, 0.5, 1.0, 2.0])
    fast = price_calls(desk_params, carry, 100.0, ks, ts)
    slow = [price_call(desk_params, carry, 100.0, k, t) for k, t in zip(ks, ts)]
    np.testing.assert_allclose(fast, slow, atol=1e-8)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(0.01, 0.2), st.floats(0.05, 1.0), st.floats(-0.9, 0.9),
       st.floats(0.1, 2.0))
def test_price_monotone_in_strike_property(kappa, theta, sigma, rho, ttm):
    p = HestonParams(kappa, theta, sigma, theta, rho)
    c90, c110 = price_calls(p, CarryTerms(), 100.0, np.array([90.0, 110.0]), ttm)
    assert c90 >= c110


def _quotes_from(params, carry, s0=100.0):
    out = []
    for t in (0.25, 0.5, 1.0):
        for k in (85.0, 95.0, 100.0, 105.0, 115.0):
            out.append(OptionQuote(date(2015, 1, 2), "SPY", k, t, float(price_call(params, carry, s0, k, t)),
                                   0.2, s0))
    return out


def test_calibration_preconditions(desk_params):
    q = _quotes_from(desk_params, CarryTerms())
    with pytest.raises(ValueError):
        calibrate(q[:4], CarryTerms(), desk_params)
    with pytest.raises(ValueError, match="maturities"):
        calibrate(q[:5], CarryTerms(), desk_params)


def test_calibration_at_exact_init_is_fixed_point(desk_params):
    carry = CarryTerms(0.01, 0.0)
    quotes = _quotes_from(desk_params, carry)
    params, report = calibrate(quotes, carry, desk_params)
    assert report.objective <= report.initial_objective
    assert report.initial_objective < 1e-12
    assert len(report.residuals) == len(quotes)
    assert report.to_dict()["residuals"][0]["strike"] == 85.0


def test_simulation_deterministic_variance():
    p = HestonParams(1.5, 0.04, 0.0, 0.04, 0.0)
    paths = simulate_euler(p, CarryTerms(), 100.0, 0.5, 50, 1000, seed=1)
    np.testing.assert_allclose(paths.integrated_variance, 0.04 * 0.5, rtol=1e-14)
    assert np.all(paths.terminal_variance == pytest.approx(0.04))


def test_simulation_reproducible_and_thread_invariant(desk_params):
    a = simulate_euler(desk_params, CarryTerms(), 100.0, 0.3, 20, 70000, seed=9, n_threads=1)
    b = simulate_euler(desk_params, CarryTerms(), 100.0, 0.3, 20, 70000, seed=9, n_threads=3)
    assert np.array_equal(a.terminal_price, b.terminal_price)
    assert np.array_equal(a.integrated_variance, b.integrated_variance)
    assert len(a) == 70000
    c = simulate_euler(desk_params, CarryTerms(), 100.0, 0.3, 20, 70000, seed=10)
    assert not np.array_equal(a.terminal_price, c.terminal_price)


def test_simulation_outputs_nonnegative(desk_params):
    harsh = HestonParams(1.0, 0.04, 1.0, 0.04, -0.9)
    paths = simulate_euler(harsh, CarryTerms(), 100.0, 1.0, 50, 20000, seed=3)
    assert paths.integrated_variance.min() >= 0
    assert paths.terminal_variance.min() >= 0
    assert paths.terminal_price.min() > 0


def test_martingale_drift(desk_params):
    carry = CarryTerms(0.03, 0.01)
    paths = simulate_euler(desk_params, carry, 100.0, 1.0, 100, 200_000, seed=11)
    se = paths.terminal_price.std() / math.sqrt(len(paths))
    assert abs(paths.terminal_price.mean() - 100.0 * math.exp(0.02)) < 3 * se


def test_mc_price_agrees_with_cf(desk_params):
    carry = CarryTerms(0.01, 0.0)
    paths = simulate_euler(desk_params, carry, 100.0, 0.5, 125, 200_000, seed=5)
    mc, se = mc_call_price(paths, 100.0, carry)
    assert abs(mc - price_call(desk_params, carry, 100.0, 100.0, 0.5)) < 3 * se


def test_path_samples_indexing():
    s = [PathSample(100.0, 0.02, 0.04), PathSample(90.0, 0.03, 0.05)]
    ps = PathSamples.from_samples(s, ttm=0.5)
    assert ps[1] == s[1] and list(ps) == s
