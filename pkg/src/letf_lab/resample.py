"""Overlapping block bootstrap of price series and percentile envelopes of strategy performance.

Bootstrap worlds are built by block-resampling the joint daily log-price
increments of the two funds and rebuilding levels from the observed
starting prices.  Option smiles are held fixed in log-moneyness
coordinates and strikes are re-anchored to the resampled underlying.  In
such a world every input of the decision rule (log-moneyness, maturity,
implied volatility, Black-Scholes delta) is unchanged, so the original
run's decisions are replayed and only the profit and loss is repriced.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import blackscholes
from .strategy import MarketDay, StepPlan, portfolio_value

DEFAULT_PROBS = (0.025, 0.975)


@dataclass(frozen=True)
class BlockBootstrapConfig:
    block_size: int = 5
    n_iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.n_iterations < 1:
            raise ValueError(f"n_iterations must be >= 1, got {self.n_iterations}")


def n_candidate_blocks(T: int, b: int) -> int:
    if not 1 <= b <= T:
        raise ValueError(f"block size {b} must lie in [1, {T}]")
    return T - b + 1


def block_indices(T: int, b: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of one overlapping-block resample, plus the drawn block starts."""
    n_cand = n_candidate_blocks(T, b)
    starts = rng.integers(0, n_cand, size=math.ceil(T / b))
    rows = (starts[:, None] + np.arange(b)[None, :]).ravel()[:T]
    return rows, starts


def block_resample(series, cfg: BlockBootstrapConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Resample whole rows of a ``T x d`` series in overlapping blocks of ``cfg.block_size``.

    Blocks keep their internal order and the alignment across columns.
    Without an explicit ``rng`` the generator is seeded from ``cfg.seed``.
    """
    x = np.asarray(series)
    if x.ndim == 1:
        x = x[:, None]
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    rows, _ = block_indices(len(x), cfg.block_size, rng)
    return x[rows]


def resample_prices(prices, cfg: BlockBootstrapConfig, rng: np.random.Generator) -> np.ndarray:
    """Block-resample joint log increments and rebuild levels from the first row."""
    p = np.asarray(prices, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if np.any(p <= 0):
        raise ValueError("prices must be positive")
    inc = np.diff(np.log(p), axis=0)
    if len(inc) == 0:
        return p.copy()
    b = min(cfg.block_size, len(inc))
    rows, _ = block_indices(len(inc), b, rng)
    path = np.vstack([np.zeros((1, p.shape[1])), np.cumsum(inc[rows], axis=0)])
    return p[0] * np.exp(path)


def strategy_envelope(per_iteration_cumulative, probs: Sequence[float] = DEFAULT_PROBS) -> np.ndarray:
    """Pointwise percentiles at ``probs`` followed by the median; shape ``(len(probs) + 1, T')``."""
    m = np.asarray(per_iteration_cumulative, dtype=float)
    if m.ndim != 2:
        raise ValueError("expected an n_iter x T' matrix")
    q = [float(p) for p in probs] + [0.5]
    if any(not 0.0 <= p <= 1.0 for p in q):
        raise ValueError("probabilities must lie in [0, 1]")
    return np.percentile(m, [100.0 * p for p in q], axis=0)


# ---------------------------------------------------------------------------
# bootstrap worlds


def underlying_series(days: Sequence[MarketDay]) -> np.ndarray:
    """``T x 2`` matrix of (unlevered, leveraged) closing prices taken from the quotes."""
    out = np.empty((len(days), 2))
    for i, d in enumerate(days):
        if not d.source or not d.target:
            raise ValueError(f"{d.date}: both funds need quotes to define the underlying series")
        out[i] = d.source[0].underlying, d.target[0].underlying
    return out


def _smiles(day: MarketDay) -> dict:
    """Per-maturity (sorted log-moneyness, IV) arrays of the leveraged quotes."""
    groups: dict = {}
    for q in day.target:
        groups.setdefault(round(q.ttm, 9), []).append((math.log(q.strike / q.underlying), q.implied_vol))
    out = {}
    for k, pts in groups.items():
        pts.sort()
        out[k] = (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
    return out


@dataclass
class _Leg:
    strike: float
    ttm_exit: float
    mid_exit: float
    iv_exit: float
    lm_exit: float
    sign: float


@dataclass
class _Step:
    t: int
    entry_value: float
    hedge: float
    legs: list


class BootstrapWorlds:
    """Replays settled decisions in resampled price worlds.

    ``plans`` maps day index to :class:`StepPlan` (skip reasons as strings
    are ignored); only steps whose exit quotes exist are replayed, matching
    the original ledger.
    """

    def __init__(self, days: Sequence[MarketDay], plans: dict, r: float, c: float):
        self.days = list(days)
        self.prices = underlying_series(self.days)
        self.r, self.c = r, c
        self.steps: list[_Step] = []
        self.smiles: dict[int, dict] = {}
        for t in sorted(plans):
            plan = plans[t]
            if isinstance(plan, str):
                continue
            step = self._prepare(t, plan)
            if step is not None:
                self.steps.append(step)
                self.smiles.setdefault(t + 1, _smiles(self.days[t + 1]))

    def _prepare(self, t: int, plan: StepPlan):
        d = plan.decision
        exit_q = {q.contract_id: q for q in self.days[t + 1].target}
        legs = []
        for cid, sign in ((d.long_id, 1.0), (d.short_id, -1.0)):
            if cid is None:
                continue
            if cid not in exit_q:
                return None
            q = exit_q[cid]
            legs.append(_Leg(q.strike, q.ttm, q.mid_price, q.implied_vol,
                             math.log(q.strike / q.underlying), sign))
        if not legs and not self.days[t + 1].target:
            return None
        return _Step(t, plan.entry_value, d.hedge_delta, legs)

    @property
    def dates(self) -> list:
        return [self.days[s.t].date for s in self.steps]

    def _exit_price(self, leg: _Leg, smile, lam_entry: float, lev_exit: float, lev_exit_orig: float) -> float:
        strike = leg.strike * lam_entry
        lm = math.log(strike / lev_exit)
        if abs(lm - leg.lm_exit) < 1e-12:
            return leg.mid_exit * lev_exit / lev_exit_orig
        lms, ivs = smile
        iv = float(np.interp(lm, lms, ivs))
        new = float(blackscholes.call_price(lev_exit, strike, leg.ttm_exit, self.r, iv, self.c))
        ref = float(blackscholes.call_price(lev_exit_orig, leg.strike, leg.ttm_exit, self.r, leg.iv_exit, self.c))
        # keep the quoted price level where the quote is not exactly a Black-Scholes price
        scale = leg.mid_exit / ref if ref > 1e-12 else 1.0
        return new * scale

    def cumulative(self, lev_prices) -> np.ndarray:
        """Cumulative P&L of the replayed decisions for one leveraged price path."""
        lev = np.asarray(lev_prices, dtype=float)
        orig = self.prices[:, 1]
        out = np.empty(len(self.steps))
        total = 0.0
        for i, s in enumerate(self.steps):
            lam_entry = lev[s.t] / orig[s.t]
            exit_px = {}
            for leg in s.legs:
                smile = self.smiles[s.t + 1][round(leg.ttm_exit, 9)]
                exit_px[leg.sign] = self._exit_price(leg, smile, lam_entry, lev[s.t + 1], orig[s.t + 1])
            exit_value = portfolio_value(exit_px.get(1.0), exit_px.get(-1.0), s.hedge, lev[s.t + 1])
            total += exit_value - lam_entry * s.entry_value
            out[i] = total
        return out

    def run(self, cfg: BlockBootstrapConfig) -> np.ndarray:
        """``n_iterations x n_steps`` matrix of cumulative P&L paths, one substream per iteration."""
        children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_iterations)
        out = np.empty((cfg.n_iterations, len(self.steps)))
        for i, ss in enumerate(children):
            world = resample_prices(self.prices, cfg, np.random.default_rng(ss))
            out[i] = self.cumulative(world[:, 1])
        return out


def write_envelope(path: str | Path, dates, original, envelope, probs=DEFAULT_PROBS,
                   header_lines: Sequence[str] = ()) -> None:
    cols = ["date", "original"] + [f"p{100 * p:g}" for p in probs] + ["median"]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for j, d in enumerate(dates):
            w.writerow([d.isoformat(), repr(float(original[j]))] + [repr(float(v)) for v in envelope[:, j]])
