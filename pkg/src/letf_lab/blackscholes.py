"""Black-Scholes call pricing, delta and implied volatility with a continuous carry yield."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr


def call_price(s, k, ttm, r, vol, c=0.0):
    """Call price with spot ``s``, strike ``k`` and carry yield ``c``; vectorized over arrays."""
    s, k, ttm, vol = map(np.asarray, (s, k, ttm, vol))
    fwd_disc = s * np.exp(-c * ttm)
    k_disc = k * np.exp(-r * ttm)
    sd = vol * np.sqrt(ttm)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(fwd_disc / k_disc) + 0.5 * sd**2) / sd
    d2 = d1 - sd
    price = fwd_disc * ndtr(d1) - k_disc * ndtr(d2)
    intrinsic = np.maximum(fwd_disc - k_disc, 0.0)
    price = np.where(sd > 0, price, intrinsic)
    return price[()] if price.ndim == 0 else price


def call_delta(s, k, ttm, r, vol, c=0.0):
    """Spot delta of a call, ``e^{-c ttm} N(d1)``."""
    s, k, ttm, vol = map(np.asarray, (s, k, ttm, vol))
    sd = vol * np.sqrt(ttm)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(s / k) + (r - c) * ttm + 0.5 * sd**2) / sd
    limit = np.where(s * np.exp((r - c) * ttm) > k, 1.0, 0.0)
    delta = np.exp(-c * ttm) * np.where(sd > 0, ndtr(d1), limit)
    return delta[()] if delta.ndim == 0 else delta


def price_bounds(s: float, k: float, ttm: float, r: float, c: float = 0.0) -> tuple[float, float]:
    """No-arbitrage bounds (lower, upper) for a European call."""
    fwd_disc = s * math.exp(-c * ttm)
    return max(0.0, fwd_disc - k * math.exp(-r * ttm)), fwd_disc


def implied_vol(price: float, s: float, k: float, ttm: float, r: float, c: float = 0.0) -> float:
    """Black-Scholes implied volatility by bracketed root finding.

    Raises ValueError when the price lies outside the open no-arbitrage interval.
    """
    lower, upper = price_bounds(s, k, ttm, r, c)
    if not lower < price < upper:
        raise ValueError(f"price {price} outside no-arbitrage bounds ({lower}, {upper})")

    def f(vol):
        return float(call_price(s, k, ttm, r, vol, c)) - price

    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e3:
            raise ValueError(f"no implied vol below {hi} for price {price}")
    lo = 1e-12
    if f(lo) >= 0:
        return lo
    return brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
