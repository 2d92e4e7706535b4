"""Conditional expected integrated variance given the terminal log return.

Production estimator: Monte Carlo binning of Euler paths on a grid that is
equidistant in terminal price.  Oracle: the semi-analytic composition of the
conditional normal law of ``log S_T`` given (integrated variance, ``V_T``),
the inverted conditional characteristic function of integrated variance,
the noncentral chi-squared transition law of ``V_T`` and the inverted
marginal characteristic function of ``log S_T``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import gammaln

from .bessel import log_bessel_i
from .heston import CarryTerms, HestonParams, PathSamples, logprice_cf

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    def __init__(self, integral: str, detail: str):
        self.integral = integral
        super().__init__(f"{integral}: {detail}")


@dataclass
class CondVarCurve:
    """Binned conditional expected integrated variance at one maturity.

    Empty bins carry ``nan`` values and a zero count.
    """

    ttm: float
    lm_grid: np.ndarray
    values: np.ndarray
    bin_counts: np.ndarray

    def __post_init__(self):
        self.lm_grid = np.asarray(self.lm_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.bin_counts = np.asarray(self.bin_counts, dtype=int)
        n = len(self.lm_grid)
        if len(self.values) != n or len(self.bin_counts) != n:
            raise ValueError("lm_grid, values and bin_counts must have equal length")
        if n > 1 and np.any(np.diff(self.lm_grid) <= 0):
            raise ValueError("lm_grid must be strictly increasing")
        if np.any(self.values[~np.isnan(self.values)] < 0):
            raise ValueError("conditional variance values must be nonnegative")

    @property
    def empty(self) -> np.ndarray:
        return (self.bin_counts == 0) | np.isnan(self.values)

    def mean_value(self) -> float:
        """Count-weighted mean over nonempty bins (the unconditional expectation estimate)."""
        ok = ~self.empty
        if not ok.any():
            raise ValueError("curve has no nonempty bins")
        w = self.bin_counts[ok].astype(float)
        if w.sum() == 0:
            return float(self.values[ok].mean())
        return float(np.average(self.values[ok], weights=w))

    def lookup(self, lm):
        """Linear interpolation over nonempty bins; returns (values, extrapolated mask).

        Outside the nonempty range the endpoint value is used and the point
        is flagged.
        """
        ok = ~self.empty
        if not ok.any():
            raise ValueError("cannot interpolate an empty conditional variance curve")
        x, y = self.lm_grid[ok], self.values[ok]
        lm = np.asarray(lm, dtype=float)
        flag = (lm < x[0]) | (lm > x[-1])
        val = np.interp(lm, x, y)
        return val, flag

    def write_csv(self, path: str | Path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# ttm={self.ttm!r}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["lm", "value", "count"])
            for x, v, c in zip(self.lm_grid, self.values, self.bin_counts):
                writer.writerow([repr(float(x)), "" if math.isnan(v) else repr(float(v)), int(c)])

    @classmethod
    def read_csv(cls, path: str | Path, ttm: float | None = None) -> "CondVarCurve":
        lm, val, cnt = [], [], []
        file_ttm = None
        with open(path, newline="") as fh:
            lines = []
            for line in fh:
                if line.startswith("#"):
                    if line.startswith("# ttm="):
                        file_ttm = float(line.split("=", 1)[1])
                    continue
                lines.append(line)
        for row in csv.DictReader(lines):
            lm.append(float(row["lm"]))
            val.append(float(row["value"]) if row["value"] else float("nan"))
            cnt.append(int(row["count"]))
        ttm = ttm if ttm is not None else file_ttm
        if ttm is None:
            raise ValueError(f"{path}: maturity not recorded; pass ttm explicitly")
        return cls(ttm, np.array(lm), np.array(val), np.array(cnt))


@dataclass(frozen=True)
class ConstantVariance:
    """Constant-volatility surrogate: the expected integrated variance is ``variance * ttm``."""

    variance: float
    ttm: float

    def lookup(self, lm):
        lm = np.asarray(lm, dtype=float)
        return np.full(lm.shape, self.variance * self.ttm)[()], np.zeros(lm.shape, dtype=bool)[()]

    def mean_value(self) -> float:
        return self.variance * self.ttm


# ---------------------------------------------------------------------------
# Monte Carlo binning


def equidistant_lm_grid(s0: float, lm_lo: float, lm_hi: float, n_bins: int) -> np.ndarray:
    """Bin centers in log-moneyness whose terminal prices ``s0 e^lm`` are equally spaced."""
    if n_bins < 2:
        raise ValueError("need at least two bins")
    return np.log(np.linspace(s0 * math.exp(lm_lo), s0 * math.exp(lm_hi), n_bins) / s0)


def bin_edges(s0: float, lm_grid) -> np.ndarray:
    centers = s0 * np.exp(np.asarray(lm_grid, dtype=float))
    if len(centers) < 2:
        raise ValueError("need at least two bin centers")
    steps = np.diff(centers)
    if not np.allclose(steps, steps[0], rtol=1e-8, atol=0.0):
        raise ValueError("lm_grid must be equidistant in terminal price s0*exp(lm)")
    step = steps[0]
    return np.concatenate([[centers[0] - step / 2], centers[:-1] + step / 2, [centers[-1] + step / 2]])


def mc_conditional_iv(paths: PathSamples, s0: float, lm_grid) -> CondVarCurve:
    """Per-bin mean of pathwise integrated variance.

    Bins are half-open ``(l_k, l_{k+1}]`` except the first, which also
    includes its left edge.  Paths outside the grid are not used.
    """
    if len(paths) == 0:
        raise ValueError("no paths")
    lm_grid = np.asarray(lm_grid, dtype=float)
    edges = bin_edges(s0, lm_grid)
    st = np.asarray(paths.terminal_price)
    idx = np.searchsorted(edges, st, side="left") - 1
    idx[st == edges[0]] = 0
    inside = (idx >= 0) & (idx < len(lm_grid))
    n_bins = len(lm_grid)
    counts = np.bincount(idx[inside], minlength=n_bins)
    sums = np.bincount(idx[inside], weights=np.asarray(paths.integrated_variance)[inside], minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    if (counts > 0).sum() == 1:
        log.warning("all in-range paths fell into a single bin")
    return CondVarCurve(paths.ttm, lm_grid, values, counts)


def fit_polynomial(curve: CondVarCurve, degree: int) -> Polynomial:
    """Least-squares polynomial in log-moneyness through the nonempty bins."""
    ok = ~curve.empty
    if ok.sum() < degree + 1:
        raise ValueError(f"degree {degree} fit needs {degree + 1} nonempty bins, have {int(ok.sum())}")
    return Polynomial.fit(curve.lm_grid[ok], curve.values[ok], degree).convert()


def smooth_curve(curve: CondVarCurve, degree: int) -> CondVarCurve:
    """Replace nonempty bin values by a polynomial fit clamped at zero; empty bins stay empty."""
    poly = fit_polynomial(curve, degree)
    ok = ~curve.empty
    values = np.full(len(curve.lm_grid), np.nan)
    values[ok] = np.maximum(poly(curve.lm_grid[ok]), 0.0)
    return CondVarCurve(curve.ttm, curve.lm_grid.copy(), values, curve.bin_counts.copy())


# ---------------------------------------------------------------------------
# densities


def _log_central_chi2(x, dof):
    return (0.5 * dof - 1.0) * np.log(x) - 0.5 * x - 0.5 * dof * math.log(2.0) - gammaln(0.5 * dof)


def noncentral_chi2_pdf(x, dof: float, lam: float):
    """Density of the noncentral chi-squared law via the Bessel representation."""
    if dof <= 0 or lam < 0:
        raise ValueError("need dof > 0 and lambda >= 0")
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("x must be positive")
    if lam == 0:
        out = np.exp(_log_central_chi2(x, dof))
    else:
        nu = 0.5 * dof - 1.0
        z = np.sqrt(lam * x)
        small = z < 1e-8
        out = np.empty(x.shape)
        # Poisson-mixture series to first order where the Bessel form would cancel inf - inf
        xs = x[small]
        out[small] = np.exp(_log_central_chi2(xs, dof) - 0.5 * lam) * (1.0 + 0.5 * lam * xs / dof)
        xb, zb = x[~small], z[~small]
        log_i = log_bessel_i(nu, zb).real
        out[~small] = 0.5 * np.exp(-0.5 * (xb + lam) + (0.25 * dof - 0.5) * np.log(xb / lam) + log_i)
    return out[()] if out.ndim == 0 else out


def transition_scale(params: HestonParams, ttm: float) -> tuple[float, float, float]:
    """(scale, dof, noncentrality) with ``V_T = scale * chi2_dof(noncentrality)``."""
    k, th, sg = params.kappa, params.theta, params.sigma
    scale = sg * sg * (-math.expm1(-k * ttm)) / (4.0 * k)
    dof = 4.0 * k * th / (sg * sg)
    lam = params.v0 * math.exp(-k * ttm) / scale
    return scale, dof, lam


def variance_transition_pdf(v_t, v0: float, params: HestonParams, ttm: float):
    """Density of ``V_T`` given ``V_0 = v0`` for the square-root variance process."""
    k, th, sg = params.kappa, params.theta, params.sigma
    v_t = np.asarray(v_t, dtype=float)
    if np.any(v_t <= 0) or v0 <= 0:
        raise ValueError("v_t and v0 must be positive")
    one_m = -math.expm1(-k * ttm)
    cst = 2.0 * k / (sg * sg * one_m)
    nu = 2.0 * k * th / (sg * sg) - 1.0
    z = 4.0 * k * math.exp(-0.5 * k * ttm) / (sg * sg * one_m) * np.sqrt(v0 * v_t)
    log_f = (
        math.log(cst)
        + k * k * th * ttm / (sg * sg)
        - 0.5 * k * ttm
        - cst * (v_t + math.exp(-k * ttm) * v0)
        + (k * th / (sg * sg) - 0.5) * np.log(v_t / v0)
        + log_bessel_i(nu, z).real
    )
    out = np.exp(log_f)
    return out[()] if out.ndim == 0 else out


def integrated_var_cf_given_endpoints(omega, v0: float, v_t: float, params: HestonParams, ttm: float):
    """Characteristic function of integrated variance given both variance endpoints."""
    if v0 <= 0 or v_t <= 0:
        raise ValueError("variance endpoints must be positive")
    k, th, sg = params.kappa, params.theta, params.sigma
    w = np.asarray(omega, dtype=complex)
    s2 = sg * sg
    nu = 2.0 * k * th / s2 - 1.0
    gam = np.sqrt(k * k - 2.0 * s2 * 1j * w)
    log_1me_g = np.log(-np.expm1(-gam * ttm))
    one_me_k = -math.expm1(-k * ttm)
    coth_k = k * (1.0 + math.exp(-k * ttm)) / one_me_k
    coth_g = gam * (1.0 + np.exp(-gam * ttm)) / (-np.expm1(-gam * ttm))
    log_pref = np.log(gam) - 0.5 * (gam - k) * ttm + math.log(one_me_k) - math.log(k) - log_1me_g
    expo = (v0 + v_t) / s2 * (coth_k - coth_g)
    log_scale = math.log(4.0 * math.sqrt(v0 * v_t) / s2)
    log_zg = log_scale + np.log(gam) - 0.5 * gam * ttm - log_1me_g
    log_zk = log_scale + math.log(k) - 0.5 * k * ttm - math.log(one_me_k)
    z_g = np.exp(log_zg)
    ratio = log_bessel_i(nu, z_g, log_z=log_zg) - log_bessel_i(nu, math.exp(log_zk)).real
    out = np.exp(log_pref + expo + ratio)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class QuadSettings:
    """Discretization of the four improper integrals in the analytic oracle."""

    n_omega: int = 1 << 12
    cf_tol: float = 1e-10
    n_vtilde: int = 401
    n_vt: int = 64
    tail_prob: float = 1e-8
    degenerate_nu: float = 1e6


def _cf_truncation(cf, start: float, tol: float, name: str, limit: float = 1e9) -> float:
    w = start
    while abs(cf(w)) >= tol:
        w *= 1.5
        if w > limit:
            raise IntegrationError(name, f"|cf| stays above {tol} beyond {limit:.3g}")
    return w


def _cumulants_from_cf(cf, scale: float) -> tuple[float, float]:
    """Mean and variance from the log-CF at two small frequencies (Richardson-corrected)."""
    dw = 1e-2 / scale
    lp = np.log(cf(np.array([dw, 2 * dw])))
    mean = (8.0 * lp[0].imag - lp[1].imag) / (6.0 * dw)
    var = (lp[1].real - 16.0 * lp[0].real) / (6.0 * dw * dw)
    return mean, max(var, (1e-6 * scale) ** 2)


def integrated_var_density_given_endpoints(vtilde, v0: float, v_t: float, params: HestonParams, ttm: float,
                                           quad: QuadSettings = QuadSettings()):
    """Density of integrated variance given endpoints by trapezoidal CF inversion."""

    def cf(w):
        return integrated_var_cf_given_endpoints(w, v0, v_t, params, ttm)

    vtilde = np.asarray(vtilde, dtype=float)
    span = max(float(np.max(np.abs(vtilde))), 1e-12)
    cutoff = _cf_truncation(cf, 1.0 / span, quad.cf_tol, "integrated-variance CF inversion")
    n = quad.n_omega
    # the trapezoidal rule aliases with period 2*pi/dw; keep it beyond twice the evaluation range
    n = max(n, int(math.ceil(cutoff * 2.0 * span / math.pi)) + 1)
    w = np.linspace(0.0, cutoff, n)
    phi = cf(w)
    wts = np.full(n, w[1] - w[0])
    wts[0] = wts[-1] = 0.5 * (w[1] - w[0])
    dens = (np.exp(-1j * np.outer(vtilde, w)) * phi).real @ wts / math.pi
    return dens


def marginal_logprice_pdf(x, params: HestonParams, carry: CarryTerms, s0: float, ttm: float,
                          quad: QuadSettings = QuadSettings()):
    """Density of ``log S_T`` by inverting its characteristic function."""

    def cf(w):
        return logprice_cf(w, params, carry, s0, ttm)

    sd = math.sqrt(max(params.theta, params.v0, 1e-6) * ttm)
    cutoff = _cf_truncation(cf, 1.0 / sd, quad.cf_tol, "log-price CF inversion")
    w = np.linspace(0.0, cutoff, quad.n_omega)
    wts = np.full(len(w), w[1] - w[0])
    wts[0] = wts[-1] = 0.5 * (w[1] - w[0])
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return (np.exp(-1j * np.outer(x, w)) * cf(w)).real @ wts / math.pi


def deterministic_integrated_variance(params: HestonParams, ttm: float) -> float:
    k = params.kappa
    return params.theta * ttm + (params.v0 - params.theta) * (-math.expm1(-k * ttm)) / k


@dataclass
class AnalyticConditional:
    value: float
    normalization: float
    marginal_density: float
    joint_mass: float
    degenerate: bool = False


def conditional_iv_components(lm: float, params: HestonParams, carry: CarryTerms, s0: float, ttm: float,
                              quad: QuadSettings = QuadSettings()) -> AnalyticConditional:
    """Analytic conditional expectation with its normalization diagnostics.

    ``normalization`` is the integral of the conditional density of
    integrated variance given ``log S_T`` (should be 1); ``joint_mass`` is
    the probability mass of the ``V_T`` grid.
    """
    k, th, sg, rho, v0 = params.kappa, params.theta, params.sigma, params.rho, params.v0
    if sg == 0 or 2.0 * k * th / (sg * sg) - 1.0 > quad.degenerate_nu:
        value = deterministic_integrated_variance(params, ttm)
        return AnalyticConditional(value, 1.0, float("nan"), 1.0, degenerate=True)
    if v0 <= 0:
        raise ValueError("analytic oracle needs v0 > 0")
    x_t = math.log(s0) + lm

    scale, dof, lam = transition_scale(params, ttm)
    v_hi = scale * stats.ncx2.ppf(1.0 - quad.tail_prob, dof, lam)
    u, uw = np.polynomial.legendre.leggauss(quad.n_vt)
    u = 0.5 * (u + 1.0)
    uw = 0.5 * uw
    v_nodes = v_hi * u * u
    v_weights = 2.0 * v_hi * u * uw
    f_vt = variance_transition_pdf(v_nodes, v0, params, ttm)
    joint_mass = float(f_vt @ v_weights)
    if abs(joint_mass - 1.0) > 1e-4:
        raise IntegrationError("terminal-variance integral", f"grid mass {joint_mass:.8f} differs from 1")

    mean_all = deterministic_integrated_variance(params, ttm)
    num = 0.0
    den = 0.0
    for vt, fw in zip(v_nodes, f_vt * v_weights):

        def cf(w, vt=vt):
            return integrated_var_cf_given_endpoints(w, v0, vt, params, ttm)

        mu, var = _cumulants_from_cf(cf, mean_all)
        sd = math.sqrt(var)
        lo = max(mu - 12.0 * sd, 1e-12 * mean_all)
        grid = np.linspace(lo, mu + 14.0 * sd, quad.n_vtilde)
        f_vtil = np.maximum(integrated_var_density_given_endpoints(grid, v0, vt, params, ttm, quad), 0.0)
        mass = trapezoid(f_vtil, grid)
        if abs(mass - 1.0) > 1e-3:
            raise IntegrationError(
                "integrated-variance integral", f"conditional density mass {mass:.6f} at v_T={vt:.4g}"
            )
        mean_x = (math.log(s0) + (carry.r - carry.c) * ttm - 0.5 * grid
                  + rho / sg * (vt - v0 - k * th * ttm + k * grid))
        var_x = (1.0 - rho * rho) * grid
        f_x = np.exp(-0.5 * (x_t - mean_x) ** 2 / var_x) / np.sqrt(2.0 * math.pi * var_x)
        num += fw * trapezoid(grid * f_x * f_vtil, grid)
        den += fw * trapezoid(f_x * f_vtil, grid)

    f_marg = float(marginal_logprice_pdf(x_t, params, carry, s0, ttm, quad)[0])
    if not f_marg > 0:
        raise IntegrationError("log-price CF inversion", f"nonpositive marginal density {f_marg:.3g}")
    return AnalyticConditional(num / f_marg, den / f_marg, f_marg, joint_mass)


def analytic_conditional_iv(lm: float, params: HestonParams, carry: CarryTerms, s0: float, ttm: float,
                            quad: QuadSettings = QuadSettings()) -> float:
    """Expected integrated variance given ``log(S_T/S_0) = lm`` from the density composition."""
    return conditional_iv_components(lm, params, carry, s0, ttm, quad).value
