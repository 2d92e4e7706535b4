"""Heston stochastic-volatility model: characteristic function, pricing, calibration and Euler paths."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate
from scipy.optimize import least_squares

from . import blackscholes
from .market_data import OptionQuote

log = logging.getLogger(__name__)

PARAM_NAMES = ("kappa", "theta", "sigma", "v0", "rho")
CALIBRATION_BOUNDS = (
    np.array([0.01, 1e-4, 0.01, 1e-4, -0.99]),
    np.array([20.0, 1.0, 3.0, 1.0, 0.99]),
)


class QuadratureError(RuntimeError):
    def __init__(self, message: str, achieved: float):
        self.achieved = achieved
        super().__init__(f"{message} (achieved abs. error {achieved:.3g})")


class CalibrationError(RuntimeError):
    def __init__(self, message: str, best: "HestonParams", objective: float):
        self.best = best
        self.objective = objective
        super().__init__(f"{message}; best objective {objective:.6g} at {best}")


@dataclass(frozen=True)
class HestonParams:
    """Heston parameters.

    ``sigma = 0`` is accepted so the deterministic-variance limit can be
    simulated; pricing and calibration treat it as the limit of the formulas.
    """

    kappa: float
    theta: float
    sigma: float
    v0: float
    rho: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not self.theta > 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not self.v0 >= 0:
            raise ValueError(f"v0 must be nonnegative, got {self.v0}")
        if not -1 < self.rho < 1:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")

    @property
    def feller(self) -> bool:
        return 2 * self.kappa * self.theta >= self.sigma**2

    def as_array(self) -> np.ndarray:
        return np.array([self.kappa, self.theta, self.sigma, self.v0, self.rho])

    @classmethod
    def from_array(cls, x) -> "HestonParams":
        return cls(*map(float, x))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CarryTerms:
    r: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.r) and math.isfinite(self.c)):
            raise ValueError("carry terms must be finite")


@dataclass(frozen=True)
class PathSample:
    terminal_price: float
    integrated_variance: float
    terminal_variance: float


@dataclass
class PathSamples:
    """Column-stored Euler path summaries; indexing yields :class:`PathSample`."""

    terminal_price: np.ndarray
    integrated_variance: np.ndarray
    terminal_variance: np.ndarray
    ttm: float
    n_steps: int

    def __len__(self):
        return len(self.terminal_price)

    def __getitem__(self, i) -> PathSample:
        return PathSample(
            float(self.terminal_price[i]),
            float(self.integrated_variance[i]),
            float(self.terminal_variance[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_samples(cls, samples: Sequence[PathSample], ttm: float = float("nan"), n_steps: int = 0):
        return cls(
            np.array([p.terminal_price for p in samples], dtype=float),
            np.array([p.integrated_variance for p in samples], dtype=float),
            np.array([p.terminal_variance for p in samples], dtype=float),
            ttm,
            n_steps,
        )


# ---------------------------------------------------------------------------
# characteristic function and pricing


def _clog1p(z):
    # numpy's complex log1p loses the real part for |z| << 1
    x, y = z.real, z.imag
    return 0.5 * np.log1p(x * (2.0 + x) + y * y) + 1j * np.arctan2(y, 1.0 + x)


def logprice_cf(omega, params: HestonParams, carry: CarryTerms, s0: float, ttm: float):
    """Characteristic function of ``log S_T`` evaluated at (possibly complex) ``omega``.

    Uses the form with ``g = (xi - d) / (xi + d)`` and ``exp(-d T)``, which
    stays on the principal branch of the logarithm.  The difference
    ``xi - d`` is computed as ``-sigma^2 (i w + w^2) / (xi + d)`` so that the
    small vol-of-vol limit does not cancel.
    """
    if not ttm > 0:
        raise ValueError("ttm must be positive")
    w = np.asarray(omega, dtype=complex)
    k, th, sg, rho = params.kappa, params.theta, params.sigma, params.rho
    s2 = sg * sg
    iw = 1j * w
    a = iw + w * w
    xi = k - rho * sg * iw
    d = np.sqrt(xi * xi + s2 * a)
    xpd = xi + d
    ratio = -a / xpd  # (xi - d) / sigma^2
    g = s2 * ratio / xpd
    e = np.exp(-d * ttm)
    one_minus_e = -np.expm1(-d * ttm)
    q = ratio * one_minus_e / (xpd * (1.0 - g))  # g (1-e) / ((1-g) sigma^2)
    log_term = _clog1p(s2 * q) / s2 if s2 > 0 else q
    C = iw * (carry.r - carry.c) * ttm + k * th * (ratio * ttm - 2.0 * log_term)
    D = ratio * one_minus_e / (1.0 - g * e)
    out = np.exp(C + D * params.v0 + iw * math.log(s0))
    return out[()] if out.ndim == 0 else out


def _gp_integrands(params, carry, s0, strike, ttm):
    log_k = math.log(strike)
    fwd = s0 * math.exp((carry.r - carry.c) * ttm)

    def p1(w):
        w = np.asarray(w, dtype=float)
        val = np.exp(-1j * w * log_k) * logprice_cf(w - 1j, params, carry, s0, ttm) / (1j * w * fwd)
        return val.real

    def p2(w):
        w = np.asarray(w, dtype=float)
        val = np.exp(-1j * w * log_k) * logprice_cf(w, params, carry, s0, ttm) / (1j * w)
        return val.real

    return p1, p2


def _integrate_to_infinity(f, cutoff=200.0, epsabs=1e-10, tail_tol=1e-12, max_cutoff=1e5, name="integral"):
    total, err, info = integrate.quad(f, 0.0, cutoff, epsabs=epsabs, epsrel=0.0, limit=1000, full_output=1)[:3]
    if err > 100 * epsabs:
        raise QuadratureError(f"{name} on [0, {cutoff}] did not converge", err)
    lo, hi = cutoff, 2 * cutoff
    while True:
        tail, terr = integrate.quad(f, lo, hi, epsabs=tail_tol, epsrel=0.0, limit=1000)
        total += tail
        err += terr
        if abs(tail) < tail_tol:
            return total, err
        if hi >= max_cutoff:
            raise QuadratureError(f"{name} tail beyond {hi} still {abs(tail):.3g}", err + abs(tail))
        lo, hi = hi, 2 * hi


def gil_pelaez_probabilities(params, carry, s0, strike, ttm) -> tuple[float, float]:
    """Exercise probabilities under the share measure (P1) and the risk-neutral measure (P2)."""
    f1, f2 = _gp_integrands(params, carry, s0, strike, ttm)
    i1, _ = _integrate_to_infinity(f1, name="share-measure probability")
    i2, _ = _integrate_to_infinity(f2, name="risk-neutral probability")
    return 0.5 + i1 / math.pi, 0.5 + i2 / math.pi


def price_call(params: HestonParams, carry: CarryTerms, s0: float, strike: float, ttm: float) -> float:
    if not (strike > 0 and ttm > 0):
        raise ValueError("strike and ttm must be positive")
    p1, p2 = gil_pelaez_probabilities(params, carry, s0, strike, ttm)
    price = s0 * math.exp(-carry.c * ttm) * p1 - strike * math.exp(-carry.r * ttm) * p2
    lower, upper = blackscholes.price_bounds(s0, strike, ttm, carry.r, carry.c)
    return min(max(price, lower), upper)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def _cf_cutoff(params, carry, s0, ttm, tol=1e-13):
    cutoff = 50.0
    while cutoff < 1e4:
        if abs(logprice_cf(cutoff, params, carry, s0, ttm)) / cutoff < tol:
            break
        cutoff *= 2.0
    return cutoff


def price_calls(params: HestonParams, carry: CarryTerms, s0, strikes, ttms, panel_width: float = 10.0):
    """Vectorized call prices by fixed composite Gauss-Legendre quadrature.

    Same two probability integrals as :func:`price_call`; used where many
    prices are needed per parameter vector (calibration).  ``s0`` may be a
    scalar or one value per strike.
    """
    strikes = np.asarray(strikes, dtype=float)
    ttms = np.broadcast_to(np.asarray(ttms, dtype=float), strikes.shape)
    spots = np.broadcast_to(np.asarray(s0, dtype=float), strikes.shape)
    out = np.empty_like(strikes)
    for key in sorted(set(zip(ttms.tolist(), spots.tolist()))):
        ttm, spot = key
        idx = np.nonzero((ttms == ttm) & (spots == spot))[0]
        cutoff = _cf_cutoff(params, carry, spot, ttm)
        n_panels = max(1, int(math.ceil(cutoff / panel_width)))
        edges = np.linspace(0.0, cutoff, n_panels + 1)
        half = 0.5 * np.diff(edges)
        w = (edges[:-1, None] + half[:, None] * (_GL_X[None, :] + 1.0)).ravel()
        wts = (half[:, None] * _GL_W[None, :]).ravel()
        fwd = spot * math.exp((carry.r - carry.c) * ttm)
        phi2 = logprice_cf(w, params, carry, spot, ttm)
        phi1 = logprice_cf(w - 1j, params, carry, spot, ttm) / fwd
        phase = np.exp(-1j * np.outer(np.log(strikes[idx]), w)) / (1j * w)
        p1 = 0.5 + (phase * phi1).real @ wts / math.pi
        p2 = 0.5 + (phase * phi2).real @ wts / math.pi
        price = spot * math.exp(-carry.c * ttm) * p1 - strikes[idx] * math.exp(-carry.r * ttm) * p2
        lower = np.maximum(0.0, spot * math.exp(-carry.c * ttm) - strikes[idx] * math.exp(-carry.r * ttm))
        out[idx] = np.clip(price, lower, spot * math.exp(-carry.c * ttm))
    return out


def implied_vol_from_price(price: float, s0: float, strike: float, ttm: float, carry: CarryTerms) -> float:
    return blackscholes.implied_vol(price, s0, strike, ttm, carry.r, carry.c)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationReport:
    params: HestonParams
    objective: float
    initial_objective: float
    residuals: np.ndarray
    rmse: float
    n_evaluations: int
    starts: int
    success: bool
    message: str
    feller: bool
    quotes: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "rmse": self.rmse,
            "n_evaluations": self.n_evaluations,
            "starts": self.starts,
            "success": self.success,
            "message": self.message,
            "feller_condition": self.feller,
            "residuals": [
                dict(q, residual=float(r)) for q, r in zip(self.quotes, self.residuals)
            ],
        }


def _start_points(init: np.ndarray) -> list[np.ndarray]:
    lo, hi = CALIBRATION_BOUNDS
    pts = [init]
    for scale in (0.7, 1.3):
        x = init * scale
        x[4] = init[4] * (2.0 - scale)
        pts.append(np.clip(x, lo + 1e-6, hi - 1e-6))
    return pts


def calibrate(quotes: Sequence[OptionQuote], carry: CarryTerms, init: HestonParams, max_nfev: int = 400):
    """Least-squares fit of Heston parameters to observed call mid prices.

    Minimizes the sum of squared price differences within box constraints
    with a trust-region reflective solver, restarting from two perturbed
    points when the first run fails.  Returns ``(params, report)``.
    """
    quotes = list(quotes)
    if len(quotes) < 5:
        raise ValueError(f"calibration needs at least 5 quotes, got {len(quotes)}")
    ttms = np.array([q.ttm for q in quotes])
    if np.ptp(ttms) < 1.0 / 365:
        raise ValueError("calibration quotes must span at least two maturities")
    strikes = np.array([q.strike for q in quotes])
    spots = np.array([q.underlying for q in quotes])
    market = np.array([q.mid_price for q in quotes])
    lo, hi = CALIBRATION_BOUNDS

    n_eval = 0

    def residuals(x):
        nonlocal n_eval
        n_eval += 1
        return price_calls(HestonParams.from_array(x), carry, spots, strikes, ttms) - market

    x_init = np.clip(init.as_array(), lo, hi)
    r0 = residuals(x_init)
    obj0 = float(r0 @ r0)
    best_x, best_obj, result = x_init, obj0, None
    starts = 0
    for x0 in _start_points(x_init):
        starts += 1
        result = least_squares(
            residuals, x0, bounds=(lo, hi), method="trf", x_scale="jac",
            ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=max_nfev,
        )
        obj = float(result.fun @ result.fun)
        if obj < best_obj:
            best_x, best_obj = result.x, obj
        if result.status > 0 and best_obj <= obj0:
            break
        log.warning("calibration start %d ended with status %s: %s", starts, result.status, result.message)
    best = HestonParams.from_array(best_x)
    if best_obj > obj0:
        raise CalibrationError("optimizer did not improve on the initial point", best, best_obj)
    if not best.feller:
        log.warning("calibrated parameters violate the Feller condition 2*kappa*theta >= sigma^2")
    res = residuals(best_x)
    report = CalibrationReport(
        params=best,
        objective=float(res @ res),
        initial_objective=obj0,
        residuals=res,
        rmse=float(np.sqrt(np.mean(res**2))),
        n_evaluations=n_eval,
        starts=starts,
        success=bool(result is not None and result.status > 0),
        message=str(result.message if result is not None else ""),
        feller=best.feller,
        quotes=[
            {"ticker": q.ticker, "strike": q.strike, "ttm": q.ttm, "market": q.mid_price} for q in quotes
        ],
    )
    return best, report


# ---------------------------------------------------------------------------
# Monte Carlo

BLOCK_PATHS = 1 << 15


def thread_count(default: int = 1) -> int:
    env = os.environ.get("LETF_LAB_THREADS")
    return max(1, int(env)) if env else default


def block_generator(seed: int, block: int) -> np.random.Generator:
    """Counter-based generator for one path block; depends only on (seed, block)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block,))
    return np.random.Generator(np.random.Philox(ss))


def _simulate_block(params, carry, ttm, n_steps, n_paths, rng, s0, variance_only=False):
    h = ttm / n_steps
    sqrt_h = math.sqrt(h)
    k, th, sg, rho = params.kappa, params.theta, params.sigma, params.rho
    rho_c = math.sqrt(1.0 - rho * rho)
    v = np.full(n_paths, params.v0)
    x = np.zeros(n_paths)
    iv = np.zeros(n_paths)
    z1 = np.empty(n_paths)
    z2 = np.empty(n_paths)
    for _ in range(n_steps):
        vp = np.maximum(v, 0.0)
        sq = np.sqrt(vp) * sqrt_h
        iv += vp
        if variance_only:
            rng.standard_normal(out=z2)
            v += k * (th - vp) * h + sg * sq * z2
            continue
        rng.standard_normal(out=z1)
        rng.standard_normal(out=z2)
        x += (carry.r - carry.c - 0.5 * vp) * h + sq * z1
        v += k * (th - vp) * h + sg * sq * (rho * z1 + rho_c * z2)
    price = s0 * np.exp(x)
    return price, iv * h, np.maximum(v, 0.0)


def simulate_euler(
    params: HestonParams,
    carry: CarryTerms,
    s0: float,
    ttm: float,
    n_steps: int,
    n_paths: int,
    seed: int,
    n_threads: int | None = None,
    variance_only: bool = False,
) -> PathSamples:
    """Full-truncation Euler scheme for the Heston system.

    The log price moves with drift ``r - c - V+/2`` and the variance uses
    ``V+ = max(V, 0)`` in drift and diffusion.  Integrated variance is the
    left-point Riemann sum ``h * sum_{i<n} V+_i``.  Paths are produced in
    fixed-size blocks, each with its own generator keyed by ``(seed, block)``,
    so output does not depend on ``n_threads``.  With ``variance_only`` the
    price is not simulated (terminal_price is then ``s0``).
    """
    if n_steps < 1 or n_paths < 1:
        raise ValueError("n_steps and n_paths must be at least 1")
    if not ttm > 0:
        raise ValueError("ttm must be positive")
    n_threads = thread_count() if n_threads is None else n_threads
    sizes = [min(BLOCK_PATHS, n_paths - start) for start in range(0, n_paths, BLOCK_PATHS)]

    def run(block):
        return _simulate_block(
            params, carry, ttm, n_steps, sizes[block], block_generator(seed, block), s0, variance_only
        )

    if n_threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    price, iv, vt = (np.concatenate(col) for col in zip(*parts))
    return PathSamples(price, iv, vt, ttm, n_steps)


def mc_call_price(paths: PathSamples, strike: float, carry: CarryTerms, ttm: float | None = None):
    """Discounted mean payoff of a call and its Monte Carlo standard error."""
    ttm = paths.ttm if ttm is None else ttm
    disc = math.exp(-carry.r * ttm)
    payoff = disc * np.maximum(paths.terminal_price - strike, 0.0)
    return float(payoff.mean()), float(payoff.std(ddof=1) / math.sqrt(len(payoff)))
