"""Deterministic synthetic option markets for an unlevered fund and a leveraged counterpart.

Used for the bundled demo fixtures and for self-consistency tests.  The
unlevered price follows a daily Heston-type discretization, the leveraged
fund compounds ``beta`` times the daily return net of its carry, and both
funds quote constant-maturity calls on fixed strike ladders.  The unlevered
smile is the Heston smile at the day's spot variance; the leveraged smile is
that smile moved to leveraged coordinates (constant-variance surrogate) with
its volatility multiplied by ``|beta|``.  Both carry small i.i.d. IV noise.
"""

from __future__ import annotations

import math
from dataclasses import replace
from datetime import date, timedelta
from typing import Sequence

import numpy as np

from . import blackscholes
from .heston import CarryTerms, HestonParams, price_calls
from .market_data import FundSpec, OptionQuote

SOURCE_TENORS = (0.1, 0.25, 0.4, 0.6, 0.8, 1.0)
TARGET_TENORS = (0.25, 0.6, 1.0)


def business_days(start: date, n: int) -> list[date]:
    out = []
    d = start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


MARKET_PARAMS = HestonParams(kappa=3.0, theta=0.04, sigma=0.3, v0=0.04, rho=-0.7)


def heston_smile(lm, ttm: float, v0: float, r: float, params: HestonParams = MARKET_PARAMS):
    """Black-Scholes IVs of Heston call prices (spot 1, no dividend) at log-moneyness ``lm``."""
    p = HestonParams(params.kappa, params.theta, params.sigma, max(v0, 1e-4), params.rho)
    strikes = np.exp(np.asarray(lm, dtype=float))
    prices = price_calls(p, CarryTerms(r, 0.0), 1.0, strikes, ttm)
    out = np.empty(len(strikes))
    for i, (k, c) in enumerate(zip(strikes, prices)):
        try:
            out[i] = blackscholes.implied_vol(float(c), 1.0, float(k), ttm, r)
        except ValueError:
            out[i] = np.nan
    return out


def simulate_prices(n_days: int, rng: np.random.Generator, s0: float = 200.0, l0: float = 60.0, beta: float = 2.0,
                    r: float = 0.01, c_target: float = 0.0, params: HestonParams = MARKET_PARAMS):
    """Daily unlevered price, leveraged price and spot variance paths."""
    kappa, theta, sigma, rho, v0 = params.kappa, params.theta, params.sigma, params.rho, params.v0
    dt = 1.0 / 252.0
    s = np.empty(n_days)
    lev = np.empty(n_days)
    v = np.empty(n_days)
    s[0], lev[0], v[0] = s0, l0, v0
    for t in range(1, n_days):
        z1, z2 = rng.standard_normal(2)
        vp = max(v[t - 1], 0.0)
        ret = math.exp((r - 0.5 * vp) * dt + math.sqrt(vp * dt) * z1) - 1.0
        s[t] = s[t - 1] * (1.0 + ret)
        lev[t] = lev[t - 1] * (1.0 + beta * ret - ((beta - 1.0) * r + c_target) * dt)
        v[t] = max(v[t - 1] + kappa * (theta - vp) * dt
                   + sigma * math.sqrt(vp * dt) * (rho * z1 + math.sqrt(1 - rho * rho) * z2), 1e-4)
    return s, lev, v


def _quote(d, fund, strike, ttm, iv, under, r, rng):
    mid = float(blackscholes.call_price(under, strike, ttm, r, iv, fund.c_star))
    mid = max(mid, 1e-4)
    spread = 0.005 * mid + 0.005
    return OptionQuote(obs_date=d, ticker=fund.ticker, strike=float(strike), ttm=float(ttm), mid_price=mid,
                       implied_vol=float(iv), underlying=float(under), bid=max(mid - spread, 0.0), ask=mid + spread,
                       volume=int(rng.integers(1, 500)))


def synthetic_market(source: FundSpec, target: FundSpec, n_days: int, seed: int, r: float = 0.01,
                     start: date = date(2015, 1, 2), source_tenors: Sequence[float] = SOURCE_TENORS,
                     target_tenors: Sequence[float] = TARGET_TENORS, n_source_strikes: int = 11,
                     n_target_strikes: int = 15, iv_noise: float = 0.004):
    """Quotes for both funds on ``n_days`` business days; returns (quotes, prices dict)."""
    rng = np.random.default_rng(seed)
    s, lev, v = simulate_prices(n_days, rng, beta=target.beta, r=r, c_target=target.c_star)
    days = business_days(start, n_days)
    src_strikes = np.round(s[0] * np.exp(np.linspace(-0.35, 0.25, n_source_strikes)), 2)
    tgt_strikes = np.round(lev[0] * np.exp(np.linspace(-0.6, 0.4, n_target_strikes)), 2)
    beta = target.beta
    quotes: list[OptionQuote] = []
    for t, d in enumerate(days):
        for ttm in source_tenors:
            lm = np.log(src_strikes / s[t])
            ivs = heston_smile(lm, ttm, v[t], r) + iv_noise * rng.standard_normal(len(lm))
            keep = (lm > -0.5) & (lm < 0.35) & np.isfinite(ivs)
            for k, iv in zip(src_strikes[keep], ivs[keep]):
                quotes.append(_quote(d, source, k, ttm, max(iv, 0.02), s[t], r, rng))
        for ttm in target_tenors:
            lm2 = np.log(tgt_strikes / lev[t])
            lm1 = (lm2 + (r * (beta - 1.0) + target.c_star) * ttm + 0.5 * beta * (beta - 1.0) * v[t] * ttm) / beta
            ivs = abs(beta) * heston_smile(lm1, ttm, v[t], r) + 2.0 * iv_noise * rng.standard_normal(len(lm2))
            keep = (lm2 > -0.8) & (lm2 < 0.6) & np.isfinite(ivs)
            for k, iv in zip(tgt_strikes[keep], ivs[keep]):
                quotes.append(_quote(d, target, k, ttm, max(iv, 0.02), lev[t], r, rng))
    return quotes, {"dates": days, source.ticker: s, target.ticker: lev}


def default_funds() -> tuple[FundSpec, FundSpec]:
    return (FundSpec("SPY", 1.0, 0.0009, 0.0), FundSpec("SSO", 2.0, 0.0090, 0.0044))


def oracle_world(days, provider, cfg, funds):
    """Rewrite the leveraged quotes so each next day realizes the strategy's own forecast.

    From the first decision day on, the leveraged underlying is held fixed,
    every contract keeps its strike and maturity, and contracts in the
    traded maturity slice reprice at the forecast IV (priced with the same
    Black-Scholes convention, ``r = cfg.r``).  Returns the modified day list.
    """
    from .strategy import StepSkipped, plan_step

    days = [replace(d, source=list(d.source), target=list(d.target)) for d in days]
    c = funds[cfg.target].c_star
    for t in range(cfg.window_w - 1, len(days) - 1):
        today = days[t]
        try:
            plan = plan_step(days[: t + 1], provider, cfg, funds)
            forecast = plan.forecast_iv
        except StepSkipped:
            forecast = {}
        new = []
        for q in today.target:
            iv = forecast.get(q.contract_id, q.implied_vol)
            mid = float(blackscholes.call_price(q.underlying, q.strike, q.ttm, cfg.r, iv, c))
            new.append(replace(q, obs_date=days[t + 1].date, implied_vol=iv, mid_price=mid, bid=None, ask=None))
        days[t + 1] = replace(days[t + 1], target=new)
    return days


DEMO_FIXTURE_SEED = 2015
DEMO_DAYS = 50


def write_demo_fixtures(directory, n_days: int = DEMO_DAYS, seed: int = DEMO_FIXTURE_SEED) -> None:
    """Regenerate the bundled demo inputs ``demo_quotes.csv`` and ``demo_funds.csv``."""
    from pathlib import Path

    from .market_data import write_funds, write_quotes

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    src, tgt = default_funds()
    quotes, _ = synthetic_market(src, tgt, n_days, seed)
    note = [f"synthetic fixture: seed={seed} days={n_days}"]
    write_quotes(directory / "demo_quotes.csv", quotes, note)
    write_funds(directory / "demo_funds.csv", [src, tgt], note)
