"""Option-chain ingestion, validation and filtering for (leveraged) ETF options."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

QUOTE_COLUMNS = (
    "obs_date",
    "ticker",
    "strike",
    "expiry_date",
    "ttm_years",
    "mid_price",
    "implied_vol",
    "underlying",
    "bid",
    "ask",
    "volume",
)
FUND_COLUMNS = ("ticker", "beta", "expense_ratio", "dividend_yield")


class QuoteValidationError(ValueError):
    """A quote or fund row violates the input schema or a domain invariant."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class FundSpec:
    ticker: str
    beta: float
    expense_ratio: float = 0.0
    dividend_yield: float = 0.0

    def __post_init__(self):
        if self.beta == 0 or not math.isfinite(self.beta):
            raise QuoteValidationError(f"{self.ticker}: leverage ratio must be nonzero")
        if self.expense_ratio < 0 or self.dividend_yield < 0:
            raise QuoteValidationError(f"{self.ticker}: negative expense ratio or dividend yield")

    @property
    def c_star(self) -> float:
        """Expense ratio corrected for the dividend yield."""
        return self.expense_ratio + self.dividend_yield


@dataclass(frozen=True)
class OptionQuote:
    obs_date: date
    ticker: str
    strike: float
    ttm: float
    mid_price: float
    implied_vol: float
    underlying: float
    bid: float | None = None
    ask: float | None = None
    volume: int | None = None
    expiry: date | None = None
    delta: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.ttm > 0:
            raise QuoteValidationError(f"ttm must be positive, got {self.ttm}")
        if not self.strike > 0:
            raise QuoteValidationError(f"strike must be positive, got {self.strike}")
        if not self.underlying > 0:
            raise QuoteValidationError(f"underlying must be positive, got {self.underlying}")
        if not self.implied_vol > 0:
            raise QuoteValidationError(f"implied vol must be positive, got {self.implied_vol}")
        if self.bid is not None and self.ask is not None:
            if self.ask < self.bid:
                raise QuoteValidationError(f"ask {self.ask} below bid {self.bid}")
            if not self.bid <= self.mid_price <= self.ask:
                raise QuoteValidationError(
                    f"mid {self.mid_price} outside [bid, ask] = [{self.bid}, {self.ask}]"
                )

    @property
    def contract_id(self) -> str:
        """Identifies the contract across observation dates.

        Uses the expiry date when known, otherwise the maturity rounded to
        whole days (constant-maturity series).
        """
        tenor = self.expiry.isoformat() if self.expiry else f"{round(self.ttm * 365)}d"
        return f"{self.ticker}|{tenor}|{self.strike:.10g}"


@dataclass(frozen=True)
class FilterPolicy:
    iv_range: tuple[float, float] = (0.01, 3.0)
    ttm_range: tuple[float, float] = (0.05, 2.5)
    logmoneyness_range: tuple[float, float] = (-3.5, 1.0)

    def __post_init__(self):
        for name in ("iv_range", "ttm_range", "logmoneyness_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: lower bound {lo} must be below upper bound {hi}")


def log_moneyness(quote: OptionQuote) -> float:
    return math.log(quote.strike / quote.underlying)


def apply_filter(quotes: Iterable[OptionQuote], policy: FilterPolicy = FilterPolicy()) -> list[OptionQuote]:
    """Drop quotes outside the policy's IV, maturity and log-moneyness ranges (bounds inclusive)."""
    iv_lo, iv_hi = policy.iv_range
    t_lo, t_hi = policy.ttm_range
    lm_lo, lm_hi = policy.logmoneyness_range
    return [
        q
        for q in quotes
        if iv_lo <= q.implied_vol <= iv_hi
        and t_lo <= q.ttm <= t_hi
        and lm_lo <= log_moneyness(q) <= lm_hi
    ]


def _data_lines(fh):
    for line in fh:
        if line.startswith("#") or not line.strip():
            continue
        yield line


def _opt_float(text: str) -> float | None:
    text = text.strip()
    return float(text) if text else None


def load_funds(path: str | Path) -> dict[str, FundSpec]:
    funds = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(_data_lines(fh))
        missing = set(FUND_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise QuoteValidationError(f"fund file missing columns {sorted(missing)}")
        for i, row in enumerate(reader, start=1):
            try:
                spec = FundSpec(
                    ticker=row["ticker"].strip(),
                    beta=float(row["beta"]),
                    expense_ratio=float(row["expense_ratio"]),
                    dividend_yield=float(row["dividend_yield"]),
                )
            except (TypeError, ValueError) as exc:
                raise QuoteValidationError(str(exc), row=i) from exc
            funds[spec.ticker] = spec
    return funds


def _parse_row(row: dict, known: set[str]) -> OptionQuote:
    ticker = row["ticker"].strip()
    if ticker not in known:
        raise QuoteValidationError(f"unknown ticker {ticker!r}")
    obs = date.fromisoformat(row["obs_date"].strip())
    expiry_text = (row.get("expiry_date") or "").strip()
    expiry = date.fromisoformat(expiry_text) if expiry_text else None
    ttm = _opt_float(row.get("ttm_years") or "")
    if ttm is None:
        if expiry is None:
            raise QuoteValidationError("need ttm_years or expiry_date")
        ttm = (expiry - obs).days / 365.0
    volume_text = (row.get("volume") or "").strip()
    return OptionQuote(
        obs_date=obs,
        ticker=ticker,
        strike=float(row["strike"]),
        ttm=ttm,
        mid_price=float(row["mid_price"]),
        implied_vol=float(row["implied_vol"]),
        underlying=float(row["underlying"]),
        bid=_opt_float(row.get("bid") or ""),
        ask=_opt_float(row.get("ask") or ""),
        volume=int(volume_text) if volume_text else None,
        expiry=expiry,
        delta=_opt_float(row.get("delta") or ""),
    )


def load_quotes(path: str | Path, funds: Sequence[FundSpec] | dict[str, FundSpec]) -> list[OptionQuote]:
    """Parse a quote CSV, validating every row against the fund list.

    Rows are numbered from 1 (first data row). Duplicate
    (date, ticker, strike, expiry) rows keep the highest volume, else the last.
    An optional ``delta`` column is carried through for external-delta hedging.
    """
    known = set(funds) if isinstance(funds, dict) else {f.ticker for f in funds}
    kept: dict[tuple, OptionQuote] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(_data_lines(fh))
        required = {"obs_date", "ticker", "strike", "mid_price", "implied_vol", "underlying"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise QuoteValidationError(f"quote file missing columns {sorted(missing)}")
        for i, row in enumerate(reader, start=1):
            try:
                quote = _parse_row(row, known)
            except QuoteValidationError as exc:
                if exc.row is None:
                    raise QuoteValidationError(str(exc), row=i) from exc
                raise
            except (TypeError, ValueError, KeyError) as exc:
                raise QuoteValidationError(f"malformed value: {exc}", row=i) from exc
            key = (quote.obs_date, quote.ticker, quote.strike, quote.expiry or round(quote.ttm * 365))
            previous = kept.get(key)
            if previous is not None and (previous.volume or 0) > (quote.volume or 0):
                continue
            kept.pop(key, None)
            kept[key] = quote
    return list(kept.values())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_quotes(path: str | Path, quotes: Iterable[OptionQuote], header_lines: Sequence[str] = ()) -> None:
    """Write quotes in the ingestion schema; floats use repr so a reload is bit-exact."""
    quotes = list(quotes)
    with_delta = any(q.delta is not None for q in quotes)
    columns = QUOTE_COLUMNS + (("delta",) if with_delta else ())
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for q in quotes:
            row = [
                q.obs_date.isoformat(),
                q.ticker,
                _fmt(q.strike),
                q.expiry.isoformat() if q.expiry else "",
                _fmt(q.ttm),
                _fmt(q.mid_price),
                _fmt(q.implied_vol),
                _fmt(q.underlying),
                _fmt(q.bid),
                _fmt(q.ask),
                _fmt(q.volume),
            ]
            if with_delta:
                row.append(_fmt(q.delta))
            writer.writerow(row)


def write_funds(path: str | Path, funds: Iterable[FundSpec], header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FUND_COLUMNS)
        for f in funds:
            writer.writerow([f.ticker, repr(float(f.beta)), repr(f.expense_ratio), repr(f.dividend_yield)])


def by_date(quotes: Iterable[OptionQuote], ticker: str | None = None) -> dict[date, list[OptionQuote]]:
    """Group quotes by observation date (sorted), optionally for one ticker."""
    out: dict[date, list[OptionQuote]] = {}
    for q in quotes:
        if ticker is None or q.ticker == ticker:
            out.setdefault(q.obs_date, []).append(q)
    return dict(sorted(out.items()))


def moneyness_array(quotes: Sequence[OptionQuote]) -> np.ndarray:
    return np.log(np.array([q.strike for q in quotes]) / np.array([q.underlying for q in quotes]))


def with_underlying(quote: OptionQuote, underlying: float, strike: float, mid_price: float) -> OptionQuote:
    """Copy of a quote re-anchored to a new underlying level."""
    ratio = underlying / quote.underlying
    return replace(
        quote,
        underlying=underlying,
        strike=strike,
        mid_price=mid_price,
        bid=None if quote.bid is None else quote.bid * ratio,
        ask=None if quote.ask is None else quote.ask * ratio,
    )
