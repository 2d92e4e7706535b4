"""Vector autoregression for factor loadings: estimation, order selection, diagnostics, forecasts."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

CRITERIA = ("aic", "hq", "sc")


@dataclass
class VarModel:
    """VAR(p) with intercept: ``z_t = intercept + sum_i coefs[i] @ z_{t-1-i} + u_t``."""

    p: int
    intercept: np.ndarray
    coefs: np.ndarray
    residuals: np.ndarray
    sigma: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.intercept)

    @classmethod
    def from_coefficients(cls, intercept, coefs) -> "VarModel":
        coefs = np.asarray(coefs, dtype=float)
        if coefs.ndim == 2:
            coefs = coefs[None]
        L = coefs.shape[1]
        return cls(coefs.shape[0], np.asarray(intercept, dtype=float).reshape(L), coefs,
                   np.zeros((0, L)), np.zeros((L, L)))

    def companion(self) -> np.ndarray:
        L, p = self.dim, self.p
        top = np.hstack(list(self.coefs))
        if p == 1:
            return top
        bottom = np.hstack([np.eye(L * (p - 1)), np.zeros((L * (p - 1), L))])
        return np.vstack([top, bottom])

    def to_dict(self) -> dict:
        return {"p": self.p, "intercept": self.intercept.tolist(), "coefs": self.coefs.tolist(),
                "sigma": self.sigma.tolist(), "nobs": int(len(self.residuals))}

    @classmethod
    def from_dict(cls, d: dict) -> "VarModel":
        m = cls.from_coefficients(d["intercept"], d["coefs"])
        m.sigma = np.array(d["sigma"], dtype=float)
        return m


def _lagged(z: np.ndarray, p: int, start: int):
    """Regressor matrix ``[1, z_{t-1}, ..., z_{t-p}]`` for ``t = start..T-1``."""
    T = len(z)
    cols = [np.ones((T - start, 1))]
    for i in range(1, p + 1):
        cols.append(z[start - i:T - i])
    return np.hstack(cols), z[start:]


def _check_series(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.ndim != 2:
        raise ValueError("series must be a T x L matrix")
    if np.any(np.ptp(z, axis=0) == 0):
        raise ValueError("series has a constant column; the VAR is degenerate")
    return z


def fit_var(z, p: int, start: int | None = None) -> VarModel:
    """Equation-wise least squares with intercept.

    ``start`` (default ``p``) is the first time index used as a response,
    so several orders can be fitted on a common sample.
    """
    z = _check_series(z)
    T, L = z.shape
    if p < 1:
        raise ValueError("order p must be at least 1")
    start = p if start is None else start
    if start < p:
        raise ValueError("start must be at least p")
    if T - start <= L * p + 1:
        raise ValueError(f"need more than L*p + p + 1 = {L * p + p + 1} observations, got {T}")
    x, y = _lagged(z, p, start)
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    sigma = resid.T @ resid / len(y)
    coefs = np.stack([beta[1 + i * L:1 + (i + 1) * L].T for i in range(p)])
    return VarModel(p, beta[0].copy(), coefs, resid, sigma)


@dataclass
class OrderSelection:
    p_aic: int
    p_hq: int
    p_sc: int
    table: dict

    def as_tuple(self) -> tuple[int, int, int]:
        return self.p_aic, self.p_hq, self.p_sc


def select_order(z, p_max: int) -> OrderSelection:
    """Information-criterion order choice on the common sample ``t >= p_max``.

    ``log det Sigma(n) + penalty * n L^2 / T_eff`` with penalties 2 (AIC),
    ``2 log log T_eff`` (HQ) and ``log T_eff`` (SC).
    """
    z = _check_series(z)
    if p_max < 1:
        raise ValueError("p_max must be at least 1")
    L = z.shape[1]
    t_eff = len(z) - p_max
    table = {c: [] for c in CRITERIA}
    for n in range(1, p_max + 1):
        m = fit_var(z, n, start=p_max)
        sign, logdet = np.linalg.slogdet(m.sigma)
        if sign <= 0:
            raise ValueError(f"singular residual covariance at order {n}")
        k = n * L * L / t_eff
        table["aic"].append(logdet + 2.0 * k)
        table["hq"].append(logdet + 2.0 * math.log(math.log(t_eff)) * k)
        table["sc"].append(logdet + math.log(t_eff) * k)
    picks = [int(np.argmin(table[c])) + 1 for c in CRITERIA]
    return OrderSelection(*picks, table={c: [float(v) for v in table[c]] for c in CRITERIA})


def is_stable(model: VarModel) -> tuple[bool, np.ndarray]:
    """Stability via the companion matrix; returns (stable, eigenvalue moduli sorted descending)."""
    moduli = np.sort(np.abs(np.linalg.eigvals(model.companion())))[::-1]
    return bool(np.all(moduli < 1.0)), moduli


def forecast(model: VarModel, z_recent) -> np.ndarray:
    """One-step forecast from the last ``p`` observations (oldest first)."""
    z_recent = np.asarray(z_recent, dtype=float)
    if z_recent.ndim == 1:
        z_recent = z_recent[None, :]
    if z_recent.shape != (model.p, model.dim):
        raise ValueError(f"need exactly {model.p} rows of dimension {model.dim}, got shape {z_recent.shape}")
    if not is_stable(model)[0]:
        warnings.warn("forecasting from a nonstable VAR", RuntimeWarning, stacklevel=2)
    out = model.intercept.copy()
    for i in range(model.p):
        out = out + model.coefs[i] @ z_recent[-1 - i]
    return out


@dataclass
class PortmanteauResult:
    statistic: float
    dof: int
    p_value: float


def portmanteau(model: VarModel, lags: int = 12) -> PortmanteauResult:
    """Adjusted multivariate Ljung-Box test for residual autocorrelation up to ``lags``."""
    if lags <= model.p:
        raise ValueError(f"lags ({lags}) must exceed the VAR order ({model.p})")
    u = model.residuals
    n, L = u.shape
    if n <= lags:
        raise ValueError("too few residuals for the requested lags")
    u = u - u.mean(0)
    c0 = u.T @ u / n
    c0_inv = np.linalg.inv(c0)
    q = 0.0
    for j in range(1, lags + 1):
        cj = u[j:].T @ u[:-j] / n
        q += np.trace(cj.T @ c0_inv @ cj @ c0_inv) / (n - j)
    q *= n * n
    dof = L * L * (lags - model.p)
    return PortmanteauResult(float(q), dof, float(stats.chi2.sf(q, dof)))


def simulate_var(intercept, coefs, T: int, rng: np.random.Generator, noise_sd: float = 1.0,
                 burn: int = 200) -> np.ndarray:
    """Simulate a Gaussian VAR path (used by diagnostics and tests)."""
    m = VarModel.from_coefficients(intercept, coefs)
    L, p = m.dim, m.p
    z = np.zeros((T + burn + p, L))
    eps = rng.normal(0.0, noise_sd, size=z.shape)
    for t in range(p, len(z)):
        z[t] = m.intercept + sum(m.coefs[i] @ z[t - 1 - i] for i in range(p)) + eps[t]
    return z[burn + p:]


def save_model(path: str | Path, model: VarModel, selection: OrderSelection | None = None,
               header: dict | None = None) -> None:
    doc = {"header": header} if header is not None else {}
    doc["model"] = model.to_dict()
    doc["stable"], moduli = is_stable(model)
    doc["moduli"] = moduli.tolist()
    if selection is not None:
        doc["selection"] = {"aic": selection.p_aic, "hq": selection.p_hq, "sc": selection.p_sc,
                            "table": selection.table}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
