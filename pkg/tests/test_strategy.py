import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from letf_lab.strategy import (
    ConstantVarianceProvider,
    MarketDay,
    MissingQuoteError,
    StepSkipped,
    StrategyConfig,
    TradeDecision,
    bs_delta,
    collect_plans,
    decide,
    ledger_from_plans,
    market_days,
    marginal_transform,
    option_leg_pnl,
    plan_step,
    portfolio_value,
    settle,
)
from letf_lab.synthetic import default_funds, oracle_world, synthetic_market

WINDOW = 30


@pytest.fixture(scope="module")
def world():
    src, tgt = default_funds()
    quotes, _ = synthetic_market(src, tgt, WINDOW + 6, seed=11)
    days = market_days(quotes, "SPY", "SSO")
    cfg = StrategyConfig("SPY", "SSO", window_w=WINDOW, r=0.01)
    funds = {"SPY": src, "SSO": tgt}
    plans = collect_plans(days, ConstantVarianceProvider(0.04), cfg, funds)
    return days, cfg, funds, plans


def test_marginal_transform():
    u, flag = marginal_transform([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    np.testing.assert_allclose(u, [0, 0.25, 0.5, 0.75, 1])
    assert not flag.any()
    u, _ = marginal_transform([0.3, 7.0], [2.0, 2.0, 2.0])
    np.testing.assert_allclose(u, 0.5)
    u, flag = marginal_transform([-1.0, 2.5, 9.0], [1, 2, 3, 4])
    assert list(flag) == [True, False, True] and u[0] == 0 and u[2] == 1
    x = np.sort(np.random.default_rng(0).normal(size=50))
    ref = np.random.default_rng(1).normal(size=30)
    assert np.all(np.diff(marginal_transform(x, ref)[0]) >= 0)
    with pytest.raises(ValueError):
        marginal_transform([1.0], [])


def test_bs_delta():
    assert bs_delta(1000.0, 1.0, 1.0, 0.0, 0.2) == pytest.approx(1.0, abs=1e-12)
    assert bs_delta(100.0, 100.0, 1.0, 0.05, 1e-9) == pytest.approx(1.0, abs=1e-9)
    assert bs_delta(100.0, 110.0, 1.0, 0.05, 1e-9) == pytest.approx(0.0, abs=1e-9)
    assert bs_delta(100.0, 100.0, 1.0, 0.0, 0.2) == pytest.approx(norm.cdf(0.1), abs=1e-12)
    assert bs_delta(100.0, 100.0, 1.0, 0.0, 0.2) == pytest.approx(0.5398, abs=1e-4)


def test_decide_cases():
    market = np.array([0.25, 0.5, 0.75])
    d = decide(market + 0.125, market, ["a", "b", "c"])
    assert d.classification == "long_only" and d.long_id == "a" and d.short_leg is None
    d = decide(market - 0.125, market, ["a", "b", "c"])
    assert d.classification == "short_only" and d.short_id == "a"
    d = decide(market + [0.052, -0.163, 0.01], market, ["A", "B", "C"])
    assert d.classification == "mixed" and (d.long_id, d.short_id) == ("A", "B")
    assert d.long_leg[1] == pytest.approx(0.052) and d.short_leg[1] == pytest.approx(0.163)
    d = decide(market, market, ["a", "b", "c"])
    assert d.classification == "none"
    d = decide(market + [0.0, 0.01, 0.0], market, ["a", "b", "c"])
    assert d.classification == "long_only" and d.long_id == "b"
    shifted = decide(market + 0.25 + [0.052, -0.163, 0.01], market + 0.25, ["A", "B", "C"])
    assert (shifted.long_id, shifted.short_id, shifted.classification) == ("A", "B", "mixed")
    with pytest.raises(ValueError):
        decide([0.1], [0.1, 0.2], ["a"])
    with pytest.raises(ValueError):
        TradeDecision(None, None, None, 0.0, "mixed")


def test_worked_trade_arithmetic():
    hedge = 0.859 - 0.461
    assert hedge == pytest.approx(0.398)
    entry = portfolio_value(27.375, 2.740, 0.398, 66.960)
    exit_ = portfolio_value(28.450, 0.320, 0.398, 68.300)
    assert entry == pytest.approx(-2.015, abs=1e-3)
    assert exit_ == pytest.approx(0.947, abs=1e-3)
    rec = settle(entry, 28.450, 0.320, 0.398, 68.300, True, True)
    assert rec.pnl == pytest.approx(2.962, abs=1e-3)
    hedge_only = settle(portfolio_value(None, None, 0.398, 66.960), None, None, 0.398, 68.300)
    assert hedge_only.pnl == pytest.approx(-0.533, abs=1e-3)
    assert portfolio_value(10.0, None, 0.0, 50.0) == 10.0
    assert settle(entry, 27.375, 2.740, 0.398, 66.960, True, True).pnl == pytest.approx(0.0, abs=1e-12)


def test_settle_missing_leg():
    with pytest.raises(MissingQuoteError):
        settle(1.0, None, 2.0, 0.3, 50.0, True, True)
    with pytest.raises(MissingQuoteError):
        settle(1.0, 2.0, None, 0.3, 50.0, True, True)


def test_config_validation():
    with pytest.raises(ValueError):
        StrategyConfig("SPY", "SSO", window_w=20)
    with pytest.raises(ValueError):
        StrategyConfig("SPY", "SSO", hedge_model="gamma")


def test_plans_are_delta_neutral(world):
    days, cfg, funds, plans = world
    c = funds["SSO"].c_star
    done = [p for p in plans.values() if not isinstance(p, str)]
    assert done
    for plan in done:
        d = plan.decision
        dl = bs_delta(*_args(plan.quotes[d.long_id], cfg, c)) if d.long_leg else 0.0
        ds = bs_delta(*_args(plan.quotes[d.short_id], cfg, c)) if d.short_leg else 0.0
        assert abs(dl - ds - d.hedge_delta) < 1e-12
        assert all(abs(q.ttm - cfg.tau_star) <= cfg.tau_tol for q in plan.quotes.values())


def _args(q, cfg, c):
    return q.underlying, q.strike, q.ttm, cfg.r, q.implied_vol, c


def test_ledger_accounting(world):
    days, cfg, funds, plans = world
    ledger = ledger_from_plans(days, plans)
    pnl = np.array([r.pnl for r in ledger.records])
    np.testing.assert_array_equal(ledger.cumulative, np.cumsum(pnl))
    for r in ledger.records:
        assert r.pnl == r.exit_value - r.entry_value
    s = ledger.summary()
    assert s["periods"] + s["skipped"] == len(plans)


def test_no_lookahead(world):
    days, cfg, funds, plans = world
    t = min(k for k, p in plans.items() if not isinstance(p, str))
    future = [replace(d, target=[replace(q, implied_vol=q.implied_vol * 3.0) for q in d.target]) for d in days[t + 1:]]
    mutated = days[: t + 1] + future
    again = plan_step(mutated[: t + 1], ConstantVarianceProvider(0.04), cfg, funds)
    assert again.decision == plans[t].decision
    assert again.forecast_iv == plans[t].forecast_iv


def test_empty_slice_skips_period(world):
    days, cfg, funds, plans = world
    t = max(plans)
    broken = list(days)
    broken[t] = MarketDay(days[t].date, days[t].source, [q for q in days[t].target if abs(q.ttm - 0.6) > 0.1])
    with pytest.raises(StepSkipped):
        plan_step(broken[: t + 1], ConstantVarianceProvider(0.04), cfg, funds)
    # a day with a single leveraged quote still yields a (one-contract) decision or a recorded skip
    single = list(days)
    one = [q for q in days[t].target if abs(q.ttm - 0.6) < 0.01][:1]
    single[t] = MarketDay(days[t].date, days[t].source, one)
    replans = dict(plans)
    try:
        replans[t] = plan_step(single[: t + 1], ConstantVarianceProvider(0.04), cfg, funds)
    except StepSkipped as exc:
        replans[t] = str(exc)
    replans[t - 1] = "skipped for the test"
    ledger = ledger_from_plans(single, replans)
    base = ledger_from_plans(days, plans)
    assert len(ledger.records) == len(base.records) - 1


def test_missing_exit_quote_is_skipped(world):
    days, cfg, funds, plans = world
    t = min(k for k, p in plans.items() if not isinstance(p, str) and p.decision.classification != "none")
    d = plans[t].decision
    gone = {d.long_id, d.short_id}
    cut = list(days)
    cut[t + 1] = MarketDay(days[t + 1].date, days[t + 1].source,
                           [q for q in days[t + 1].target if q.contract_id not in gone])
    ledger = ledger_from_plans(cut, plans)
    assert any(date == days[t].date for date, _ in ledger.skipped)


def test_external_delta_mode(world):
    days, cfg, funds, plans = world
    t = max(k for k, p in plans.items() if not isinstance(p, str))
    ext = replace(cfg, hedge_model="external_delta")
    with pytest.raises(StepSkipped):
        plan_step(days[: t + 1], ConstantVarianceProvider(0.04), ext, funds)
    tagged = list(days)
    tagged[t] = MarketDay(days[t].date, days[t].source, [replace(q, delta=0.5) for q in days[t].target])
    plan = plan_step(tagged[: t + 1], ConstantVarianceProvider(0.04), ext, funds)
    legs = (plan.decision.long_leg is not None) - (plan.decision.short_leg is not None)
    assert plan.decision.hedge_delta == pytest.approx(0.5 * legs)


def test_oracle_world_is_profitable(world):
    days, cfg, funds, _ = world
    oracle = oracle_world(days, ConstantVarianceProvider(0.04), cfg, funds)
    plans = collect_plans(oracle, ConstantVarianceProvider(0.04), cfg, funds)
    ledger = ledger_from_plans(oracle, plans)
    legs = option_leg_pnl(oracle, plans)
    assert legs and min(legs.values()) >= -1e-12
    assert ledger.hit_rate == 1.0


def test_collect_plans_preconditions(world):
    days, cfg, funds, _ = world
    with pytest.raises(ValueError):
        collect_plans(days[:WINDOW], ConstantVarianceProvider(0.04), cfg, funds)
    with pytest.raises(ValueError):
        collect_plans(days, ConstantVarianceProvider(0.04), cfg, {"SPY": funds["SPY"]})
    assert math.isnan(ledger_from_plans(days, {}).hit_rate)
