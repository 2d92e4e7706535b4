"""Log-moneyness scaling between funds with different leverage ratios."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .market_data import FundSpec, OptionQuote, log_moneyness

log = logging.getLogger(__name__)

TTM_TOLERANCE = 1.0 / 365.0


class CondVarSource(Protocol):
    ttm: float

    def lookup(self, lm): ...

    def mean_value(self) -> float: ...


@dataclass(frozen=True)
class ScalingContext:
    """Everything needed to move a log-moneyness coordinate from ``source`` to ``target``.

    ``condvar`` supplies the expected integrated variance conditional on the
    unlevered log return (a :class:`~letf_lab.cond_var.CondVarCurve` or a
    :class:`~letf_lab.cond_var.ConstantVariance`).
    """

    source: FundSpec
    target: FundSpec
    r: float
    ttm: float
    condvar: CondVarSource

    def __post_init__(self):
        if abs(self.condvar.ttm - self.ttm) > 1e-12:
            raise ValueError(f"conditional-variance maturity {self.condvar.ttm} differs from context ttm {self.ttm}")

    @property
    def slope(self) -> float:
        return self.target.beta / self.source.beta


@dataclass(frozen=True)
class ScaledPoint:
    lm: float
    lm_unlevered: float
    extrapolated: bool


def to_unlevered(lm_source, ctx: ScalingContext):
    """Unlevered log-moneyness at which the conditional variance is looked up.

    For an unlevered source this is the coordinate itself.  Otherwise the
    leveraged-to-unlevered relation is inverted with the conditional variance
    replaced by its unconditional mean (the curve's count-weighted mean).
    """
    lm_source = np.asarray(lm_source, dtype=float)
    b, cs = ctx.source.beta, ctx.source.c_star
    if b == 1:
        return lm_source
    e_bar = ctx.condvar.mean_value()
    return (lm_source + (ctx.r * (b - 1.0) + cs) * ctx.ttm + 0.5 * b * (b - 1.0) * e_bar) / b


def scale_log_moneyness(lm_source, ctx: ScalingContext):
    """Map source-fund log-moneyness to target-fund coordinates.

    Returns ``(lm_target, extrapolated)``; the flag marks points whose
    unlevered coordinate fell outside the conditional-variance curve and were
    clamped to its end values.
    """
    b1, c1 = ctx.target.beta, ctx.target.c_star
    b2, c2 = ctx.source.beta, ctx.source.c_star
    lm_source = np.asarray(lm_source, dtype=float)
    lm1 = to_unlevered(lm_source, ctx)
    e_cond, flag = ctx.condvar.lookup(lm1)
    k = b1 / b2
    drift = (k * (b2 - 1.0) - (b1 - 1.0)) * ctx.r + k * c2 - c1
    out = k * lm_source + drift * ctx.ttm + 0.5 * (b1 * (b2 - 1.0) - b1 * (b1 - 1.0)) * e_cond
    out = np.asarray(out, dtype=float)
    return (out[()], np.asarray(flag)[()]) if out.ndim == 0 else (out, np.asarray(flag))


def scale_quote_set(quotes: Sequence[OptionQuote], ctx: ScalingContext) -> list[tuple[float, float]]:
    """Scaled coordinates paired with the unchanged implied volatilities."""
    if not quotes:
        return []
    ttms = np.array([q.ttm for q in quotes])
    if ttms.max() - ttms.min() > TTM_TOLERANCE:
        raise ValueError(
            f"quotes span maturities {ttms.min():.6f}..{ttms.max():.6f}; scale one maturity slice at a time"
        )
    lm = np.array([log_moneyness(q) for q in quotes])
    scaled, flag = scale_log_moneyness(lm, ctx)
    if np.any(flag):
        log.info("%d of %d quotes outside the conditional-variance grid", int(np.sum(flag)), len(quotes))
    return [(float(s), q.implied_vol) for s, q in zip(np.atleast_1d(scaled), quotes)]
