"""Robust local-linear M-smoothing (Huber loss) and bootstrap uniform confidence bands.

The smoother solves, at every evaluation point ``x``,

    min_{a, b}  sum_i K_h(x - X_i) * rho_c(Y_i - a - b (X_i - x))

with Huber's ``rho_c`` by iteratively reweighted least squares.  All solves
are vectorized over evaluation points and (for the bootstrap) replicates.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

KERNELS = ("gaussian", "quartic")
HUBER_EFFICIENCY = 1.345
MAD_TO_SD = 1.4826
MAX_ITER = 100
GRAD_TOL = 1e-10
# replicates per vectorized IRLS batch; bounds the (batch, grid, n) working arrays
BATCH = 64


@dataclass(frozen=True)
class SmootherConfig:
    """Settings of the local-linear M-smoother.

    ``h`` and ``huber_c`` may be left as ``None``: bandwidth selection fills
    ``h``, and ``huber_c`` defaults to the scale-adapted 95%-efficiency
    constant computed from a least-squares pilot fit.
    """

    kernel: str = "gaussian"
    h: float | None = None
    huber_c: float | None = None
    eval_grid: tuple = ()
    support_trim: float = 0.05

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.h is not None and not self.h > 0:
            raise ValueError(f"bandwidth must be positive, got {self.h}")
        if self.huber_c is not None and not self.huber_c > 0:
            raise ValueError(f"huber_c must be positive, got {self.huber_c}")
        if not 0 <= self.support_trim < 0.5:
            raise ValueError(f"support_trim must lie in [0, 0.5), got {self.support_trim}")
        object.__setattr__(self, "eval_grid", tuple(float(v) for v in self.eval_grid))

    def with_h(self, h: float) -> "SmootherConfig":
        return replace(self, h=h)


def kernel(u, name: str = "gaussian"):
    u = np.asarray(u, dtype=float)
    if name == "gaussian":
        return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    if name == "quartic":
        return np.where(np.abs(u) <= 1.0, 15.0 / 16.0 * (1.0 - u * u) ** 2, 0.0)
    raise ValueError(f"unknown kernel {name!r}")


def kernel_weights(x_eval, x, h: float, name: str = "gaussian") -> np.ndarray:
    """Matrix ``K_h(x_eval[g] - x[i])``."""
    x_eval = np.asarray(x_eval, dtype=float)
    x = np.asarray(x, dtype=float)
    return kernel((x_eval[:, None] - x[None, :]) / h, name) / h


def huber_psi(r, c: float):
    return np.clip(r, -c, c)


def huber_rho(r, c: float):
    a = np.abs(r)
    return np.where(a <= c, 0.5 * r * r, c * a - 0.5 * c * c)


def _irls_weights(r, c):
    a = np.abs(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a <= c, 1.0, c / a)


def _wls(w, u, y):
    """Batched weighted local-linear solve; returns (a, b, singular mask)."""
    s0 = w.sum(-1)
    s1 = (w * u).sum(-1)
    s2 = (w * u * u).sum(-1)
    t0 = (w * y).sum(-1)
    t1 = (w * u * y).sum(-1)
    det = s0 * s2 - s1 * s1
    scale = np.maximum(s0 * s2, np.finfo(float).tiny)
    singular = (s0 <= 0) | (det <= 1e-13 * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(singular, np.where(s0 > 0, t0 / s0, np.nan), (s2 * t0 - s1 * t1) / det)
        b = np.where(singular, 0.0, (s0 * t1 - s1 * t0) / det)
    return a, b, singular


def local_linear_m(x, y, grid, h: float, c: float, name: str = "gaussian", exclude_self: bool = False):
    """Local-linear Huber fits at ``grid`` for one or several response vectors.

    ``y`` has shape ``(n,)`` or ``(B, n)``.  Returns ``(fit, slope, flagged,
    iterations)`` with ``fit`` shaped like ``(G,)`` or ``(B, G)``; ``flagged``
    marks grid points with an empty or degenerate neighborhood.
    ``exclude_self`` zeroes the weight of observation ``g`` at grid point
    ``g`` (leave-one-out fits at the design points).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = np.asarray(grid, dtype=float)
    single = y.ndim == 1
    yb = y[None, :] if single else y
    k = kernel_weights(grid, x, h, name)
    if exclude_self:
        if len(grid) != len(x):
            raise ValueError("exclude_self needs the grid to be the design points")
        np.fill_diagonal(k, 0.0)
    u = x[None, :] - grid[:, None]
    ksum = k.sum(-1)

    fits = np.empty((yb.shape[0], len(grid)))
    slopes = np.empty_like(fits)
    flagged = np.zeros(len(grid), dtype=bool)
    max_iter_used = 0
    for start in range(0, yb.shape[0], BATCH):
        yy = yb[start:start + BATCH][:, None, :]
        a, b, sing = _wls(k[None], u[None], yy)
        flagged |= sing.any(0)
        for it in range(1, MAX_ITER + 1):
            r = yy - a[..., None] - b[..., None] * u[None]
            psi = huber_psi(r, c)
            g0 = (k[None] * psi).sum(-1)
            g1 = (k[None] * psi * u[None]).sum(-1)
            with np.errstate(invalid="ignore", divide="ignore"):
                grad = np.where(sing, 0.0, np.hypot(g0, g1 / h) / ksum)
            if np.nanmax(grad, initial=0.0) < GRAD_TOL:
                break
            obj = (k[None] * huber_rho(r, c)).sum(-1)
            # Newton step on the currently unclipped residuals (exact once the clipped set settles)
            hw = k[None] * (np.abs(r) <= c)
            h0, h1, h2 = hw.sum(-1), (hw * u[None]).sum(-1), (hw * u[None] ** 2).sum(-1)
            det = h0 * h2 - h1 * h1
            with np.errstate(invalid="ignore", divide="ignore"):
                a_n = a + (h2 * g0 - h1 * g1) / det
                b_n = b + (h0 * g1 - h1 * g0) / det
                r_n = yy - a_n[..., None] - b_n[..., None] * u[None]
                obj_n = (k[None] * huber_rho(r_n, c)).sum(-1)
            newton_ok = np.isfinite(obj_n) & (det > 1e-13 * np.maximum(h0 * h2, np.finfo(float).tiny))
            newton_ok &= obj_n <= obj
            fallback = ~newton_ok & ~sing
            if fallback.any():
                # IRLS step where Newton failed, halved while it increases the objective
                a_i, b_i, _ = _wls(k[None] * _irls_weights(r, c), u[None], yy)
                r_i = yy - a_i[..., None] - b_i[..., None] * u[None]
                obj_i = (k[None] * huber_rho(r_i, c)).sum(-1)
                worse = obj_i > obj
                a_i = np.where(worse, 0.5 * (a + a_i), a_i)
                b_i = np.where(worse, 0.5 * (b + b_i), b_i)
                a_n = np.where(fallback, a_i, a_n)
                b_n = np.where(fallback, b_i, b_n)
            a = np.where(sing, a, a_n)
            b = np.where(sing, b, b_n)
        else:
            log.warning("M-smoother reached %d iterations (max gradient %.3g)", MAX_ITER, float(np.nanmax(grad)))
        max_iter_used = max(max_iter_used, it)
        fits[start:start + BATCH] = a
        slopes[start:start + BATCH] = b
    fits[:, flagged] = np.where(np.isfinite(fits[:, flagged]), fits[:, flagged], np.nan)
    if single:
        return fits[0], slopes[0], flagged, max_iter_used
    return fits, slopes, flagged, max_iter_used


def local_linear_ls(x, y, grid, h: float, name: str = "gaussian") -> np.ndarray:
    """Plain local-linear least-squares smoother (the unbounded-``c`` limit)."""
    x = np.asarray(x, dtype=float)
    k = kernel_weights(grid, x, h, name)
    u = x[None, :] - np.asarray(grid, dtype=float)[:, None]
    a, _, _ = _wls(k, u, np.asarray(y, dtype=float)[None, :])
    return a


def default_huber_c(x, y, h: float, name: str = "gaussian") -> float:
    """1.345 times the MAD-based residual scale of a least-squares pilot fit."""
    resid = np.asarray(y, dtype=float) - local_linear_ls(x, y, x, h, name)
    mad = float(np.median(np.abs(resid - np.median(resid))))
    scale = MAD_TO_SD * mad
    if not scale > 0:
        scale = float(np.std(resid))
    if not scale > 0:
        scale = 1.0
    return HUBER_EFFICIENCY * scale


@dataclass
class LLMFit:
    grid: np.ndarray
    fit: np.ndarray
    residuals: np.ndarray
    flagged: np.ndarray
    huber_c: float
    iterations: int


def _validate_xy(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(x) < 10:
        raise ValueError(f"need at least 10 observations, got {len(x)}")
    return x, y


def fit_llm(x, y, cfg: SmootherConfig) -> LLMFit:
    """Local-linear Huber fit on ``cfg.eval_grid`` plus residuals at the data points."""
    x, y = _validate_xy(x, y)
    if cfg.h is None:
        raise ValueError("bandwidth not set; use cv_bandwidth or set cfg.h")
    c = cfg.huber_c if cfg.huber_c is not None else default_huber_c(x, y, cfg.h, cfg.kernel)
    grid = np.asarray(cfg.eval_grid, dtype=float) if cfg.eval_grid else np.sort(x)
    both = np.concatenate([grid, x])
    fit, _, flagged, iters = local_linear_m(x, y, both, cfg.h, c, cfg.kernel)
    n_g = len(grid)
    return LLMFit(grid, fit[:n_g], y - fit[n_g:], flagged[:n_g], c, iters)


def cv_scores(x, y, cfg: SmootherConfig, h_grid: Sequence[float]) -> np.ndarray:
    """Leave-one-out mean Huber prediction loss for each candidate bandwidth."""
    x, y = _validate_xy(x, y)
    scores = []
    for h in h_grid:
        c = cfg.huber_c if cfg.huber_c is not None else default_huber_c(x, y, h, cfg.kernel)
        pred, _, flagged, _ = local_linear_m(x, y, x, h, c, cfg.kernel, exclude_self=True)
        if flagged.any():
            scores.append(np.inf)
            continue
        scores.append(float(np.mean(huber_rho(y - pred, c))))
    return np.array(scores)


def cv_bandwidth(x, y, cfg: SmootherConfig, h_grid: Sequence[float], rtol: float = 1e-9) -> float:
    """Bandwidth minimizing the leave-one-out Huber loss; near-ties go to the smallest ``h``."""
    h_grid = np.asarray(list(h_grid), dtype=float)
    if h_grid.size == 0:
        raise ValueError("h_grid must be nonempty")
    scores = cv_scores(x, y, cfg, h_grid)
    if not np.isfinite(scores).any():
        raise ValueError("every candidate bandwidth leaves some point without neighbors")
    best = np.nanmin(scores)
    tied = np.abs(scores - best) <= rtol * max(abs(best), np.finfo(float).tiny)
    return float(h_grid[tied].min())


@dataclass
class UniformBand:
    grid: np.ndarray
    fit: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    d_star: float
    in_support: np.ndarray = field(default=None)
    d_samples: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.in_support is None:
            self.in_support = np.ones(len(self.grid), dtype=bool)

    @property
    def half_width(self) -> np.ndarray:
        return self.upper - self.fit

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return (self.lower <= values) & (values <= self.upper)


def conditional_edf_weights(x, h: float, name: str = "gaussian") -> np.ndarray:
    """Row ``t`` holds the kernel probabilities of drawing residual ``s`` at ``X_t``."""
    k = kernel_weights(x, x, h, name)
    return k / k.sum(1, keepdims=True)


def centered_residuals(resid, probs) -> np.ndarray:
    """Matrix ``resid[s] - mu_t`` where ``mu_t`` is the kernel-weighted mean at ``X_t``."""
    mu = probs @ resid
    return resid[None, :] - mu[:, None]


def draw_residuals(resid, probs, n_boot: int, rng: np.random.Generator, rescale: bool = False) -> np.ndarray:
    """``(n_boot, n)`` draws from the centered conditional edf at each design point.

    With ``rescale`` the centered residuals at ``X_t`` are divided by
    ``sqrt(1 - sum_s p_ts^2)``, undoing the spread lost to centering.
    """
    centered = centered_residuals(resid, probs)
    if rescale:
        centered = centered / np.sqrt(1.0 - (probs * probs).sum(1))[:, None]
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    uni = rng.random((n_boot, len(resid)))
    out = np.empty_like(uni)
    for t in range(len(resid)):
        idx = np.searchsorted(cdf[t], uni[:, t], side="right")
        out[:, t] = centered[t, np.minimum(idx, len(resid) - 1)]
    return out


def hat_matrix(x, h: float, name: str = "gaussian") -> np.ndarray:
    """Linear local-linear smoother matrix at the design points (``fit = H @ y``)."""
    x = np.asarray(x, dtype=float)
    k = kernel_weights(x, x, h, name)
    u = x[None, :] - x[:, None]
    s0, s1, s2 = k.sum(1), (k * u).sum(1), (k * u * u).sum(1)
    w = k * (s2[:, None] - s1[:, None] * u)
    return w / (s0 * s2 - s1 * s1)[:, None]


def adjusted_residuals(resid, x, h: float, name: str = "gaussian") -> np.ndarray:
    """Residuals rescaled for the variance lost to fitting, ``1 - 2 H_tt + sum_j H_tj^2``."""
    hm = hat_matrix(x, h, name)
    factor = 1.0 - 2.0 * np.diag(hm) + (hm * hm).sum(1)
    return np.asarray(resid, dtype=float) / np.sqrt(np.clip(factor, 1e-3, None))


def band_scale(x, resid, grid, h: float, c: float, name: str = "gaussian") -> np.ndarray:
    """Pointwise band scale ``sqrt(E_x psi^2) / (sqrt(f_X(x)) f_{eps|x}(0))``."""
    x = np.asarray(x, dtype=float)
    k = kernel_weights(grid, x, h, name)
    ksum = k.sum(1)
    f_x = ksum / len(x)
    psi2 = (k @ huber_psi(resid, c) ** 2) / ksum
    sd = np.std(resid)
    iqr = np.subtract(*np.percentile(resid, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    b = 0.9 * spread * len(x) ** (-0.2)
    f_eps0 = (k @ (kernel(resid / b, "gaussian") / b)) / ksum
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(psi2) / (np.sqrt(f_x) * f_eps0)


def support_mask(x, grid, trim: float) -> np.ndarray:
    lo, hi = np.quantile(np.asarray(x, dtype=float), [trim, 1.0 - trim])
    grid = np.asarray(grid, dtype=float)
    return (grid >= lo) & (grid <= hi)


def oversmoothing_bandwidth(h: float, n: int) -> float:
    return h * n ** (0.2 - 1.0 / 9.0)


def uniform_band(x, y, cfg: SmootherConfig, g: float | None = None, B: int = 1000, alpha: float = 0.05,
                 seed: int = 0, adjust_residuals: bool = True) -> UniformBand:
    """Bootstrap uniform confidence band around the local-linear M-fit.

    Residuals are resampled at each design point from the kernel-weighted,
    centered conditional edf and added to an oversmoothed fit (bandwidth
    ``g``); each replicate is refit with ``h`` and the supremum of the
    scaled deviation over the trimmed support gives ``d_b``.

    ``adjust_residuals`` compensates the resampled residuals for the spread
    lost to fitting (leverage) and to centering; without it the bootstrap
    understates the noise level and the band undercovers in small samples.
    """
    x, y = _validate_xy(x, y)
    if cfg.h is None:
        raise ValueError("bandwidth not set")
    if B < 100:
        raise ValueError(f"need at least 100 bootstrap replicates, got {B}")
    if not 0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    h = cfg.h
    n = len(x)
    g = oversmoothing_bandwidth(h, n) if g is None else g
    if not g > h:
        raise ValueError(f"oversmoothing bandwidth g={g} must exceed h={h}")

    first = fit_llm(x, y, cfg)
    grid, fit, resid, c = first.grid, first.fit, first.residuals, first.huber_c
    inside = support_mask(x, grid, cfg.support_trim)
    if not inside.any():
        raise ValueError("no evaluation point inside the trimmed support")

    if np.max(np.abs(resid)) <= 1e-10 * (1.0 + np.max(np.abs(y))):
        warnings.warn("residuals are numerically zero; returning a zero-width band", RuntimeWarning, stacklevel=2)
        return UniformBand(grid, fit, fit.copy(), fit.copy(), alpha, 0.0, inside, np.zeros(B))

    both = np.concatenate([grid, x])
    m_g, _, _, _ = local_linear_m(x, y, both, g, c, cfg.kernel)
    m_g_grid, m_g_x = m_g[: len(grid)], m_g[len(grid):]

    probs = conditional_edf_weights(x, h, cfg.kernel)
    rng = np.random.default_rng(seed)
    pool = adjusted_residuals(resid, x, h, cfg.kernel) if adjust_residuals else resid
    eps = draw_residuals(pool, probs, B, rng, rescale=adjust_residuals)
    y_star = m_g_x[None, :] + eps
    grid_j = grid[inside]
    q_all = band_scale(x, resid, grid, h, c, cfg.kernel)
    q_j = q_all[inside]
    if not np.all(np.isfinite(q_j)) or np.any(q_j <= 0):
        raise ValueError("band scale is undefined on the support; residual density estimate vanished")
    m_star, _, _, _ = local_linear_m(x, y_star, grid_j, h, c, cfg.kernel)
    d = np.max(np.abs(m_star - m_g_grid[inside][None, :]) / q_j[None, :], axis=1)
    k = math.ceil((1.0 - alpha) * B)
    d_star = float(np.sort(d)[k - 1])
    half = q_all * d_star
    return UniformBand(grid, fit, fit - half, fit + half, alpha, d_star, inside, d)


@dataclass
class OverlapProfile:
    disjoint: bool
    overlap: np.ndarray


def bands_disjoint(a: UniformBand, b: UniformBand) -> OverlapProfile:
    """Whether two bands are disjoint at every grid point, with per-point overlap length."""
    if len(a.grid) != len(b.grid) or not np.allclose(a.grid, b.grid, rtol=0, atol=1e-12):
        raise ValueError("bands are evaluated on different grids")
    overlap = np.minimum(a.upper, b.upper) - np.maximum(a.lower, b.lower)
    # touching endpoints count as overlapping
    return OverlapProfile(bool(np.all(overlap < 0)), np.maximum(overlap, 0.0))
