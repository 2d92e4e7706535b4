"""Trade-with-the-smile backtest between an unlevered fund and a leveraged counterpart.

Each rolling step rescales the unlevered fund's log-moneyness into the
leveraged fund's coordinates, fits the factor model on the window, forecasts
the next-day surface from the loadings' VAR, compares it with today's
leveraged-fund smile at one maturity, opens a delta-hedged long/short option
position and closes it the next day.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import blackscholes, dsfm, var_forecast
from .cond_var import ConstantVariance
from .market_data import FundSpec, OptionQuote, by_date, log_moneyness
from .moneyness import ScalingContext, scale_log_moneyness

log = logging.getLogger(__name__)

CLASSIFICATIONS = ("long_only", "short_only", "mixed", "none")
HEDGE_MODELS = ("black_scholes_delta", "external_delta")
LEDGER_COLUMNS = ("date", "class", "long_id", "short_id", "hedge_delta", "entry_value", "exit_value", "pnl",
                  "cumulative")


# ---------------------------------------------------------------------------
# building blocks


def marginal_transform(values, reference):
    """Empirical CDF of ``reference`` (midranks, linear between distinct values) scaled to [0, 1].

    Returns ``(u, clamped)``; values outside the reference range map to 0 or 1
    and are flagged.  A reference with a single distinct value maps
    everything to 0.5.
    """
    ref = np.asarray(reference, dtype=float).ravel()
    if ref.size == 0:
        raise ValueError("reference sample is empty")
    vals = np.asarray(values, dtype=float)
    uniq, inverse, counts = np.unique(ref, return_inverse=True, return_counts=True)
    n = ref.size
    if uniq.size == 1:
        u = np.full(vals.shape, 0.5)
        clamped = vals != uniq[0]
        return u[()] if u.ndim == 0 else u, clamped[()] if clamped.ndim == 0 else clamped
    upper = np.cumsum(counts)
    midrank = upper - (counts - 1) / 2.0
    levels = (midrank - 1.0) / (n - 1.0)
    u = np.interp(vals, uniq, levels)
    below, above = vals < uniq[0], vals > uniq[-1]
    u = np.where(below, 0.0, np.where(above, 1.0, u))
    clamped = below | above
    return (u[()], clamped[()]) if u.ndim == 0 else (u, clamped)


def bs_delta(s, k, ttm, r, iv, c: float = 0.0):
    """Black-Scholes call delta."""
    return blackscholes.call_delta(s, k, ttm, r, iv, c)


@dataclass(frozen=True)
class TradeDecision:
    date: date | None
    long_leg: tuple | None
    short_leg: tuple | None
    hedge_delta: float
    classification: str

    def __post_init__(self):
        if self.classification not in CLASSIFICATIONS:
            raise ValueError(f"unknown classification {self.classification!r}")
        if self.classification != "none" and self.long_leg is None and self.short_leg is None:
            raise ValueError("a trade needs at least one leg")
        for leg in (self.long_leg, self.short_leg):
            if leg is not None and not leg[1] > 0:
                raise ValueError("leg difference must be positive")

    @property
    def long_id(self):
        return None if self.long_leg is None else self.long_leg[0]

    @property
    def short_id(self):
        return None if self.short_leg is None else self.short_leg[0]

    @property
    def net_position(self) -> str:
        """Descriptive net direction: option legs count +1/-1, the hedge share counts with its sign."""
        score = (self.long_leg is not None) - (self.short_leg is not None) - self.hedge_delta
        return "long" if score > 0 else "short" if score < 0 else "flat"


def decide(iv_model_next, iv_market_now, quote_ids) -> TradeDecision:
    """Apply the three-case rule to forecast-minus-market IV differences.

    Equal values contribute to neither side; ties at the maximum go to the
    lowest index.
    """
    model = np.asarray(iv_model_next, dtype=float)
    market = np.asarray(iv_market_now, dtype=float)
    ids = list(quote_ids)
    if not (len(model) == len(market) == len(ids)) or len(ids) == 0:
        raise ValueError("need equal-length, nonempty model, market and id lists")
    diff = model - market
    above, below = diff > 0, diff < 0
    long_leg = short_leg = None
    if above.any():
        i = int(np.argmax(np.where(above, diff, -np.inf)))
        long_leg = (ids[i], float(diff[i]))
    if below.any():
        j = int(np.argmax(np.where(below, -diff, -np.inf)))
        short_leg = (ids[j], float(-diff[j]))
    if long_leg and short_leg:
        cls = "mixed"
    elif long_leg:
        cls = "long_only"
    elif short_leg:
        cls = "short_only"
    else:
        cls = "none"
    return TradeDecision(None, long_leg, short_leg, 0.0, cls)


def portfolio_value(c_long: float | None, c_short: float | None, hedge_delta: float, underlying: float) -> float:
    """Long call minus short call minus the hedge position in the underlying."""
    return (c_long or 0.0) - (c_short or 0.0) - hedge_delta * underlying


@dataclass(frozen=True)
class PnlRecord:
    date: date | None
    entry_value: float
    exit_value: float
    pnl: float
    cumulative: float


class MissingQuoteError(LookupError):
    pass


def settle(entry_value: float, c_long_exit: float | None, c_short_exit: float | None, hedge_delta: float,
           underlying_exit: float, has_long: bool | None = None, has_short: bool | None = None,
           when: date | None = None, cumulative_before: float = 0.0) -> PnlRecord:
    """Close the position at next-day prices with the entry hedge ratio frozen.

    ``has_long`` / ``has_short`` declare which legs were opened; a declared
    leg without an exit price raises :class:`MissingQuoteError`.
    """
    if has_long and c_long_exit is None:
        raise MissingQuoteError("no exit quote for the long leg")
    if has_short and c_short_exit is None:
        raise MissingQuoteError("no exit quote for the short leg")
    exit_value = portfolio_value(c_long_exit, c_short_exit, hedge_delta, underlying_exit)
    pnl = exit_value - entry_value
    return PnlRecord(when, entry_value, exit_value, pnl, cumulative_before + pnl)


# ---------------------------------------------------------------------------
# conditional-variance providers


class CondVarProvider(Protocol):
    def refresh(self, source_quotes: Sequence[OptionQuote], r: float, c: float) -> None: ...

    def curve(self, ttm: float): ...


@dataclass
class ConstantVarianceProvider:
    """Constant expected variance rate; optionally re-estimated from the latest ATM implied variance."""

    variance: float = 0.04
    from_quotes: bool = False

    def refresh(self, source_quotes, r, c):
        if self.from_quotes and source_quotes:
            lm = np.abs([log_moneyness(q) for q in source_quotes])
            near = np.argsort(lm)[: max(1, len(lm) // 10)]
            self.variance = float(np.median([source_quotes[i].implied_vol ** 2 for i in near]))

    def curve(self, ttm):
        return ConstantVariance(self.variance, ttm)


@dataclass
class HestonCondVarProvider:
    """Calibrates the model on the newest day and bins simulated paths per maturity (cached per step).

    Each refresh starts the calibration from ``init`` and seeds the
    simulation from the observation date, so a step's curve depends only on
    that day's quotes, not on how many steps ran before it.
    """

    init: object
    n_paths: int = 200_000
    n_bins: int = 41
    lm_range: tuple = (-0.6, 0.4)
    seed: int = 0
    steps_per_year: int = 252
    _params: object = field(default=None, init=False, repr=False)
    _carry: object = field(default=None, init=False, repr=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False)
    _stamp: int = field(default=0, init=False, repr=False)

    def refresh(self, source_quotes, r, c):
        from .heston import CarryTerms, calibrate

        source_quotes = list(source_quotes)
        self._carry = CarryTerms(r, c)
        self._params, _ = calibrate(source_quotes, self._carry, self.init)
        self._cache.clear()
        self._stamp = source_quotes[0].obs_date.toordinal() if source_quotes else 0

    def curve(self, ttm):
        """Curve simulated at ``ttm`` rounded to whole days, labelled with the requested maturity."""
        from .cond_var import CondVarCurve, equidistant_lm_grid, mc_conditional_iv
        from .heston import simulate_euler

        if self._params is None:
            raise RuntimeError("provider not refreshed")
        key = max(1, round(ttm * 365))
        if key not in self._cache:
            t = key / 365.0
            paths = simulate_euler(self._params, self._carry, 100.0, t, max(1, round(self.steps_per_year * t)),
                                   self.n_paths, seed=self.seed + 7919 * self._stamp + key)
            self._cache[key] = mc_conditional_iv(paths, 100.0, equidistant_lm_grid(100.0, *self.lm_range,
                                                                                   self.n_bins))
        cur = self._cache[key]
        return CondVarCurve(ttm, cur.lm_grid, cur.values, cur.bin_counts)


# ---------------------------------------------------------------------------
# backtest


@dataclass
class StrategyConfig:
    source: str
    target: str
    window_w: int = 100
    tau_star: float = 0.6
    L: int = 3
    basis: dsfm.BasisSpec | None = None
    r: float = 0.0
    hedge_model: str = "black_scholes_delta"
    var_order: int = 1
    tau_tol: float = 2.0 / 365.0
    grid_size: int = 101
    order_m: int = 3
    order_t: int = 3
    n_interior_m: int = 3
    n_interior_t: int = 1

    def __post_init__(self):
        if self.window_w < 30:
            raise ValueError(f"window must span at least 30 days, got {self.window_w}")
        if self.hedge_model not in HEDGE_MODELS:
            raise ValueError(f"hedge_model must be one of {HEDGE_MODELS}")
        if not self.tau_star > 0:
            raise ValueError("tau_star must be positive")
        if self.L < 0 or self.var_order < 1:
            raise ValueError("L must be >= 0 and var_order >= 1")


@dataclass
class MarketDay:
    date: date
    source: list
    target: list


@dataclass
class StepPlan:
    """Everything decided at the close of day ``t`` (uses data dated <= t only)."""

    date: date
    decision: TradeDecision
    quotes: dict
    forecast_iv: dict
    market_iv: dict
    entry_value: float
    underlying: float


def market_days(quotes: Sequence[OptionQuote], source: str, target: str) -> list[MarketDay]:
    src = by_date(quotes, source)
    tgt = by_date(quotes, target)
    return [MarketDay(d, src.get(d, []), tgt.get(d, [])) for d in sorted(set(src) | set(tgt))]


class StepSkipped(Exception):
    pass


def _hedge_delta(q: OptionQuote, cfg: StrategyConfig, c: float) -> float:
    if cfg.hedge_model == "external_delta":
        if q.delta is None:
            raise StepSkipped(f"no external delta for {q.contract_id}")
        return q.delta
    return float(bs_delta(q.underlying, q.strike, q.ttm, cfg.r, q.implied_vol, c))


def window_panels(history: Sequence[MarketDay], provider: CondVarProvider, cfg: StrategyConfig,
                  funds: dict[str, FundSpec]):
    """Rescaled, marginally transformed factor-model panels for the window ending at ``history[-1]``.

    Returns ``(panels, lm_reference, ttm_reference)``.
    """
    window = list(history[-cfg.window_w:])
    src_fund, tgt_fund = funds[cfg.source], funds[cfg.target]
    last_source = window[-1].source
    if not last_source:
        raise StepSkipped("no unlevered quotes on the decision day")
    provider.refresh(last_source, cfg.r, src_fund.c_star)

    scaled_days = []
    for day in window:
        if not day.source:
            continue
        lm_hat = np.empty(len(day.source))
        for i, q in enumerate(day.source):
            ctx = ScalingContext(src_fund, tgt_fund, cfg.r, q.ttm, provider.curve(q.ttm))
            lm_hat[i] = float(scale_log_moneyness(log_moneyness(q), ctx)[0])
        scaled_days.append((day, lm_hat))
    if len(scaled_days) < cfg.L + 2:
        raise StepSkipped("too few days with unlevered quotes in the window")

    lm_ref = np.concatenate([s for _, s in scaled_days])
    ttm_ref = np.concatenate([[q.ttm for q in d.source] for d, _ in scaled_days])
    panels = []
    for t, (day, lm_hat) in enumerate(scaled_days):
        u_m, _ = marginal_transform(lm_hat, lm_ref)
        u_t, _ = marginal_transform([q.ttm for q in day.source], ttm_ref)
        panels.append(dsfm.DayPanel(t, u_m, u_t, [q.implied_vol for q in day.source]))
    return panels, lm_ref, ttm_ref


def window_basis(panels, cfg: StrategyConfig) -> dsfm.BasisSpec:
    if cfg.basis is not None:
        return cfg.basis
    return dsfm.default_basis(np.concatenate([p.x_m for p in panels]), np.concatenate([p.x_t for p in panels]),
                              cfg.order_m, cfg.order_t, cfg.n_interior_m, cfg.n_interior_t)


def forecast_surface(history: Sequence[MarketDay], provider: CondVarProvider, cfg: StrategyConfig,
                     funds: dict[str, FundSpec]):
    """Steps 1-4 on the window ending at ``history[-1]``.

    Returns ``(interpolator, lm_reference, ttm_reference)`` where the
    interpolator maps unit-square coordinates to the forecast IV.
    """
    panels, lm_ref, ttm_ref = window_panels(history, provider, cfg, funds)
    model = dsfm.fit(panels, cfg.L, window_basis(panels, cfg))

    if cfg.L > 0:
        loadings = model.Z[:, 1:]
        try:
            vm = var_forecast.fit_var(loadings, cfg.var_order)
            z_next = var_forecast.forecast(vm, loadings[-cfg.var_order:])
        except ValueError as exc:
            log.warning("VAR forecast unavailable (%s); carrying the last loadings forward", exc)
            z_next = loadings[-1]
        z_row = np.concatenate([[1.0], z_next])
    else:
        z_row = np.ones(1)
    grid = np.linspace(0.0, 1.0, cfg.grid_size)
    surf = dsfm.surface_at(model, z_row, grid, grid)
    return RegularGridInterpolator((grid, grid), surf, method="linear"), lm_ref, ttm_ref


def plan_step(history: Sequence[MarketDay], provider: CondVarProvider, cfg: StrategyConfig,
              funds: dict[str, FundSpec]) -> StepPlan:
    """Steps 1-7 at the close of ``history[-1]``; raises :class:`StepSkipped` with a reason."""
    today = history[-1]
    slice_ = [q for q in today.target if abs(q.ttm - cfg.tau_star) <= cfg.tau_tol]
    if not slice_:
        raise StepSkipped(f"no leveraged quotes within {cfg.tau_tol:.4f} years of tau*={cfg.tau_star}")
    interp, lm_ref, ttm_ref = forecast_surface(history, provider, cfg, funds)
    if not ttm_ref.min() <= cfg.tau_star <= ttm_ref.max():
        raise StepSkipped("tau* outside the window's maturity range")
    u_m, _ = marginal_transform([log_moneyness(q) for q in slice_], lm_ref)
    u_tau, _ = marginal_transform(cfg.tau_star, ttm_ref)
    pts = np.column_stack([np.atleast_1d(u_m), np.full(len(slice_), float(u_tau))])
    iv_next = interp(pts)
    iv_now = np.array([q.implied_vol for q in slice_])
    ids = [q.contract_id for q in slice_]
    if len(set(ids)) != len(ids):
        raise StepSkipped("duplicate contracts in the maturity slice")
    decision = decide(iv_next, iv_now, ids)
    by_id = dict(zip(ids, slice_))
    c = funds[cfg.target].c_star
    d_long = _hedge_delta(by_id[decision.long_id], cfg, c) if decision.long_leg else 0.0
    d_short = _hedge_delta(by_id[decision.short_id], cfg, c) if decision.short_leg else 0.0
    hedge = d_long - d_short
    decision = replace(decision, date=today.date, hedge_delta=hedge)
    underlying = slice_[0].underlying
    entry = portfolio_value(by_id[decision.long_id].mid_price if decision.long_leg else None,
                            by_id[decision.short_id].mid_price if decision.short_leg else None,
                            hedge, underlying)
    return StepPlan(today.date, decision, by_id, dict(zip(ids, iv_next.tolist())), dict(zip(ids, iv_now.tolist())),
                    entry, underlying)


@dataclass
class TradeLedger:
    decisions: list = field(default_factory=list)
    records: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def cumulative(self) -> np.ndarray:
        return np.array([r.cumulative for r in self.records])

    @property
    def hit_rate(self) -> float:
        scored = [h for h in self.hits if h is not None]
        return float(np.mean(scored)) if scored else float("nan")

    def summary(self) -> dict:
        counts = {c: sum(d.classification == c for d in self.decisions) for c in CLASSIFICATIONS}
        net = {k: sum(d.net_position == k for d in self.decisions) for k in ("long", "short", "flat")}
        scored = [h for h in self.hits if h is not None]
        return {
            "periods": len(self.records),
            "skipped": len(self.skipped),
            "cumulative_pnl": float(self.records[-1].cumulative) if self.records else 0.0,
            "hit_rate": None if not scored else float(np.mean(scored)),
            "hits": int(sum(scored)),
            "scored_periods": len(scored),
            "classification_counts": counts,
            "net_position_counts": net,
            "skip_reasons": [{"date": d.isoformat(), "reason": r} for d, r in self.skipped],
        }

    def write_csv(self, path: str | Path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LEDGER_COLUMNS)
            for d, r in zip(self.decisions, self.records):
                w.writerow([d.date.isoformat(), d.classification, d.long_id or "", d.short_id or "",
                            repr(float(d.hedge_delta)), repr(float(r.entry_value)), repr(float(r.exit_value)),
                            repr(float(r.pnl)), repr(float(r.cumulative))])

    def write_summary(self, path: str | Path, header: dict | None = None) -> None:
        doc = {"header": header} if header is not None else {}
        doc.update(self.summary())
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def _hit(plan: StepPlan, exit_quotes: dict) -> bool | None:
    d = plan.decision
    legs = []
    if d.long_leg:
        legs.append((d.long_id, 1.0))
    if d.short_leg:
        legs.append((d.short_id, -1.0))
    if not legs:
        return None
    return all(math.copysign(1.0, exit_quotes[i].implied_vol - plan.market_iv[i]) == s
               and exit_quotes[i].implied_vol != plan.market_iv[i] for i, s in legs)


def collect_plans(days: Sequence[MarketDay], provider: CondVarProvider, cfg: StrategyConfig,
                  funds: dict[str, FundSpec]) -> dict:
    """Plans (or skip reasons) for every decision day ``t``; step ``t`` only sees ``days[:t+1]``."""
    days = list(days)
    for name in (cfg.source, cfg.target):
        if name not in funds:
            raise ValueError(f"fund {name!r} not in the fund list")
    if len(days) < cfg.window_w + 1:
        raise ValueError(f"need at least window_w + 1 = {cfg.window_w + 1} days, got {len(days)}")
    plans = {}
    for t in range(cfg.window_w - 1, len(days) - 1):
        try:
            plans[t] = plan_step(days[: t + 1], provider, cfg, funds)
        except StepSkipped as exc:
            log.info("%s skipped: %s", days[t].date, exc)
            plans[t] = str(exc)
    return plans


def settle_plan(plan: StepPlan, tomorrow: MarketDay, cumulative: float) -> PnlRecord:
    d = plan.decision
    exit_quotes = {q.contract_id: q for q in tomorrow.target}
    missing = [i for i in (d.long_id, d.short_id) if i is not None and i not in exit_quotes]
    if missing:
        raise MissingQuoteError(f"no exit quote for {', '.join(missing)}")
    if tomorrow.target:
        underlying_exit = tomorrow.target[0].underlying
    elif d.classification == "none":
        underlying_exit = plan.underlying
    else:
        raise MissingQuoteError("no leveraged quotes on the exit day")
    return settle(plan.entry_value,
                  exit_quotes[d.long_id].mid_price if d.long_leg else None,
                  exit_quotes[d.short_id].mid_price if d.short_leg else None,
                  d.hedge_delta, underlying_exit, bool(d.long_leg), bool(d.short_leg),
                  when=plan.date, cumulative_before=cumulative)


def ledger_from_plans(days: Sequence[MarketDay], plans: dict) -> TradeLedger:
    ledger = TradeLedger()
    cumulative = 0.0
    for t in sorted(plans):
        plan = plans[t]
        if isinstance(plan, str):
            ledger.skipped.append((days[t].date, plan))
            continue
        try:
            rec = settle_plan(plan, days[t + 1], cumulative)
        except MissingQuoteError as exc:
            log.warning("%s skipped: %s", days[t].date, exc)
            ledger.skipped.append((days[t].date, str(exc)))
            continue
        cumulative = rec.cumulative
        ledger.decisions.append(plan.decision)
        ledger.records.append(rec)
        ledger.hits.append(_hit(plan, {q.contract_id: q for q in days[t + 1].target}))
    return ledger


def run_backtest(days: Sequence[MarketDay], provider: CondVarProvider, cfg: StrategyConfig,
                 funds: dict[str, FundSpec]) -> TradeLedger:
    """Roll the strategy over ``days``: decide at the close of day ``t``, settle on day ``t+1``."""
    days = list(days)
    return ledger_from_plans(days, collect_plans(days, provider, cfg, funds))


def option_leg_pnl(days: Sequence[MarketDay], plans: dict) -> dict:
    """P&L of the option legs alone (hedge removed) for every settled step."""
    out = {}
    for t, plan in plans.items():
        if isinstance(plan, str):
            continue
        d = plan.decision
        exit_quotes = {q.contract_id: q for q in days[t + 1].target}
        if any(i is not None and i not in exit_quotes for i in (d.long_id, d.short_id)):
            continue
        pnl = 0.0
        if d.long_leg:
            pnl += exit_quotes[d.long_id].mid_price - plan.quotes[d.long_id].mid_price
        if d.short_leg:
            pnl -= exit_quotes[d.short_id].mid_price - plan.quotes[d.short_id].mid_price
        out[t] = pnl
    return out
