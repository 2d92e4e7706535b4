"""Dynamic semiparametric factor model on a tensor B-spline basis.

The surface on day ``t`` is ``sum_l Z[t, l] * m_l(x)`` with ``Z[:, 0] == 1`` and
``m_l(x) = A[l] @ psi(x)``, ``psi`` the tensor-product B-spline basis on the
unit square.  Estimation alternates closed-form least-squares updates of the
loadings (one small solve per day) and of the coefficient matrix (one global
solve), then rotates the factors to an orthonormal, variance-ordered system.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

log = logging.getLogger(__name__)

GRAM_GRID = 101
RIDGE = 1e-8


@dataclass(frozen=True)
class BasisSpec:
    """Tensor B-spline basis; knot vectors are full (including repeated end knots).

    ``order`` is the spline order (degree + 1).  The number of basis
    functions per coordinate is ``len(knots) - order``.
    """

    order_m: int
    order_t: int
    knots_m: tuple
    knots_t: tuple

    def __post_init__(self):
        object.__setattr__(self, "knots_m", tuple(float(v) for v in self.knots_m))
        object.__setattr__(self, "knots_t", tuple(float(v) for v in self.knots_t))
        for name, order, knots in (("m", self.order_m, self.knots_m), ("t", self.order_t, self.knots_t)):
            if order < 1:
                raise ValueError(f"spline order ({name}) must be at least 1")
            kn = np.asarray(knots)
            if np.any(np.diff(kn) < 0):
                raise ValueError(f"knots_{name} must be nondecreasing")
            if len(kn) - order < 1:
                raise ValueError(f"knots_{name} too short for order {order}")
            if np.any(kn[:order] != kn[0]) or np.any(kn[-order:] != kn[-1]):
                raise ValueError(f"knots_{name} need multiplicity {order} at both ends")
            if kn[0] > 0 or kn[-1] < 1:
                raise ValueError(f"knots_{name} must span [0, 1]")

    @property
    def U(self) -> int:
        return len(self.knots_m) - self.order_m

    @property
    def V(self) -> int:
        return len(self.knots_t) - self.order_t

    @property
    def K(self) -> int:
        return self.U * self.V

    def to_dict(self) -> dict:
        return {"order_m": self.order_m, "order_t": self.order_t,
                "knots_m": list(self.knots_m), "knots_t": list(self.knots_t)}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(int(d["order_m"]), int(d["order_t"]), tuple(d["knots_m"]), tuple(d["knots_t"]))


def clamped_knots(order: int, interior: Sequence[float]) -> tuple:
    interior = sorted(float(v) for v in interior)
    return (0.0,) * order + tuple(interior) + (1.0,) * order


def default_basis(x_m=None, x_t=None, order_m: int = 3, order_t: int = 3,
                  n_interior_m: int = 3, n_interior_t: int = 1) -> BasisSpec:
    """Clamped knots with interior knots at equidistant quantiles of the pooled coordinates.

    With the defaults there are 9 moneyness knots and 7 maturity knots,
    i.e. a 6 x 4 tensor basis.  Without data the interior knots are uniform.
    """

    def interior(x, n):
        probs = np.arange(1, n + 1) / (n + 1)
        if x is None or len(x) == 0:
            return probs
        return np.quantile(np.asarray(x, dtype=float), probs)

    return BasisSpec(order_m, order_t, clamped_knots(order_m, interior(x_m, n_interior_m)),
                     clamped_knots(order_t, interior(x_t, n_interior_t)))


def _univariate_design(x, knots, order) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    t = np.asarray(knots)
    if np.any(x < t[0]) or np.any(x > t[-1]) or np.any(~np.isfinite(x)):
        raise ValueError(f"coordinates outside the knot span [{t[0]}, {t[-1]}]")
    return BSpline.design_matrix(x, t, order - 1).toarray()


def tensor_design(x_m, x_t, basis: BasisSpec) -> np.ndarray:
    """Rows ``B_i(x_m) * B_j(x_t)`` flattened with column index ``i * V + j``."""
    bm = _univariate_design(x_m, basis.knots_m, basis.order_m)
    bt = _univariate_design(x_t, basis.knots_t, basis.order_t)
    return (bm[:, :, None] * bt[:, None, :]).reshape(len(bm), basis.K)


@dataclass
class DayPanel:
    t: int
    x_m: np.ndarray
    x_t: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x_m = np.asarray(self.x_m, dtype=float)
        self.x_t = np.asarray(self.x_t, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not (len(self.x_m) == len(self.x_t) == len(self.y)):
            raise ValueError("panel columns differ in length")
        if len(self.y) == 0:
            raise ValueError(f"day {self.t}: panel is empty")
        for name, v in (("x_m", self.x_m), ("x_t", self.x_t)):
            if np.any(v < 0) or np.any(v > 1):
                raise ValueError(f"day {self.t}: {name} outside the unit interval")

    def __len__(self):
        return len(self.y)


def read_panels(path: str | Path) -> list[DayPanel]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(lines):
        rows.setdefault(int(row["t"]), []).append((float(row["x_m"]), float(row["x_t"]), float(row["y"])))
    out = []
    for t in sorted(rows):
        arr = np.array(rows[t])
        out.append(DayPanel(t, arr[:, 0], arr[:, 1], arr[:, 2]))
    return out


def write_panels(path: str | Path, panels: Sequence[DayPanel], header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x_m", "x_t", "y"])
        for p in panels:
            for a, b, c in zip(p.x_m, p.x_t, p.y):
                w.writerow([p.t, repr(float(a)), repr(float(b)), repr(float(c))])


@dataclass
class ConvergenceReport:
    iterations: int
    converged: bool
    objective: list = field(default_factory=list)
    monotone: bool = True
    ridge_days: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged, "monotone": self.monotone,
                "objective": [float(v) for v in self.objective], "ridge_days": list(self.ridge_days)}


@dataclass
class DsfmModel:
    basis: BasisSpec
    L: int
    A: np.ndarray
    Z: np.ndarray
    days: list
    report: ConvergenceReport

    def factor_values(self, x_m, x_t) -> np.ndarray:
        """``(n, L+1)`` values of every factor function at the given points."""
        return tensor_design(x_m, x_t, self.basis) @ self.A.T

    def predict(self, panel: DayPanel, z_row=None) -> np.ndarray:
        if z_row is None:
            z_row = self.Z[self.days.index(panel.t)]
        return self.factor_values(panel.x_m, panel.x_t) @ np.asarray(z_row, dtype=float)

    def to_dict(self) -> dict:
        return {"basis": self.basis.to_dict(), "L": self.L, "A": self.A.tolist(), "Z": self.Z.tolist(),
                "days": list(self.days), "convergence": self.report.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DsfmModel":
        rep = d.get("convergence", {})
        report = ConvergenceReport(rep.get("iterations", 0), rep.get("converged", True), rep.get("objective", []),
                                   rep.get("monotone", True), rep.get("ridge_days", []))
        return cls(BasisSpec.from_dict(d["basis"]), int(d["L"]), np.array(d["A"], dtype=float),
                   np.array(d["Z"], dtype=float), list(d["days"]), report)

    def save(self, path: str | Path, header: dict | None = None) -> None:
        doc = {"header": header} if header is not None else {}
        doc.update(self.to_dict())
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DsfmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _solve_loadings(f, y, L):
    """Least-squares loadings for one day; ridge fallback if the system is rank deficient."""
    fz, resid = f[:, 1:], y - f[:, 0]
    g = fz.T @ fz
    rhs = fz.T @ resid
    if L == 0:
        return np.ones(1), False
    if np.linalg.matrix_rank(g) < L:
        lam = RIDGE * max(np.trace(g), np.finfo(float).tiny) / L
        return np.concatenate([[1.0], np.linalg.solve(g + lam * np.eye(L), rhs)]), True
    return np.concatenate([[1.0], np.linalg.solve(g, rhs)]), False


def _objective(designs, panels, A, Z):
    return float(sum(np.sum((p.y - (d @ A.T) @ z) ** 2) for d, p, z in zip(designs, panels, Z)))


def _update_A(designs, panels, Z, K):
    L1 = Z.shape[1]
    n = L1 * K
    normal = np.zeros((n, n))
    rhs = np.zeros(n)
    for d, p, z in zip(designs, panels, Z):
        dtd = d.T @ d
        normal += np.kron(np.outer(z, z), dtd)
        rhs += np.kron(z, d.T @ p.y)
    sol = np.linalg.lstsq(normal, rhs, rcond=None)[0]
    return sol.reshape(L1, K)


def _initial_coefficients(designs, panels, L, K):
    coef = []
    for d, p in zip(designs, panels):
        g = d.T @ d
        lam = 1e-6 * max(np.trace(g), 1.0) / K
        coef.append(np.linalg.solve(g + lam * np.eye(K), d.T @ p.y))
    coef = np.array(coef)
    mean = coef.mean(0)
    _, _, vt = np.linalg.svd(coef - mean, full_matrices=False)
    comps = vt[:L]
    if comps.shape[0] < L:
        comps = np.vstack([comps, np.eye(K)[: L - comps.shape[0]]])
    return np.vstack([mean, comps])


def fit(panels: Sequence[DayPanel], L: int, basis: BasisSpec, tol: float = 1e-7, max_iter: int = 500,
        seed: int | None = None, init: DsfmModel | None = None, orthonormalize: bool = True) -> DsfmModel:
    """Alternating least squares for loadings and basis coefficients.

    ``init`` (a fitted model of lower order) seeds the leading factors and
    loadings; additional loadings start at zero so the starting objective
    equals the smaller model's.  The estimator is deterministic; ``seed`` is
    accepted for interface uniformity.
    """
    panels = list(panels)
    T = len(panels)
    if L < 0:
        raise ValueError("L must be nonnegative")
    if T < L + 2:
        raise ValueError(f"need at least L+2 = {L + 2} days, got {T}")
    n_obs = sum(len(p) for p in panels)
    if n_obs < 5 * basis.K:
        raise ValueError(f"need at least 5K = {5 * basis.K} observations, got {n_obs}")
    K = basis.K
    designs = [tensor_design(p.x_m, p.x_t, basis) for p in panels]

    if init is not None:
        if init.basis != basis or init.L > L:
            raise ValueError("initial model must share the basis and have order <= L")
        day_idx = {t: i for i, t in enumerate(init.days)}
        extra = L - init.L
        if extra:
            resid = [p.y - d @ init.A.T @ init.Z[day_idx[p.t]] for d, p in zip(designs, panels)]
            pseudo = [DayPanel(p.t, p.x_m, p.x_t, r) for p, r in zip(panels, resid)]
            new_rows = _initial_coefficients(designs, pseudo, extra, K)[1:]
            A = np.vstack([init.A, new_rows])
        else:
            A = init.A.copy()
        Z = np.hstack([init.Z[[day_idx[p.t] for p in panels]], np.zeros((T, extra))])
        obj = [_objective(designs, panels, A, Z)]
    else:
        A = _initial_coefficients(designs, panels, L, K)
        Z = None
        obj = []

    ridge_days: set[int] = set()
    converged = False
    monotone = True
    scale = float(sum(np.sum(p.y ** 2) for p in panels))
    it = 0
    for it in range(1, max_iter + 1):
        zs = []
        for d, p in zip(designs, panels):
            z, used_ridge = _solve_loadings(d @ A.T, p.y, L)
            if used_ridge:
                ridge_days.add(p.t)
            zs.append(z)
        Z = np.array(zs)
        A = _update_A(designs, panels, Z, K)
        current = _objective(designs, panels, A, Z)
        if obj and current > obj[-1] * (1 + 1e-10) + 1e-14 * scale:
            monotone = False
            log.warning("ALS objective increased at iteration %d (%.6g -> %.6g)", it, obj[-1], current)
        obj.append(current)
        if L == 0 or current <= 1e-24 * scale:
            converged = True
            break
        if len(obj) >= 2 and obj[-2] - current <= tol * obj[-2]:
            converged = True
            break
    if ridge_days:
        log.warning("ridge fallback used for %d day(s) with rank-deficient loading solves", len(ridge_days))
    report = ConvergenceReport(it, converged, obj, monotone, sorted(ridge_days))
    model = DsfmModel(basis, L, A, Z, [p.t for p in panels], report)
    return orthonormalize_model(model) if orthonormalize and L > 0 else model


def gram_matrix(basis: BasisSpec, n: int = GRAM_GRID) -> np.ndarray:
    """Basis inner products by averaging over an ``n x n`` grid of the unit square."""
    g = np.linspace(0.0, 1.0, n)
    bm = _univariate_design(g, basis.knots_m, basis.order_m)
    bt = _univariate_design(g, basis.knots_t, basis.order_t)
    gm = bm.T @ bm / n
    gt = bt.T @ bt / n
    return np.kron(gm, gt)


def _factor_means(basis: BasisSpec, A: np.ndarray, n: int = GRAM_GRID) -> np.ndarray:
    g = np.linspace(0.0, 1.0, n)
    bm = _univariate_design(g, basis.knots_m, basis.order_m).mean(0)
    bt = _univariate_design(g, basis.knots_t, basis.order_t).mean(0)
    return A @ np.kron(bm, bt)


def orthonormalize_model(model: DsfmModel) -> DsfmModel:
    """Rotate to orthonormal factors, orthogonal to ``m_0``, ordered by loading variance.

    The fitted surface ``Z[t] @ A`` is unchanged up to rounding.
    """
    L = model.L
    if L == 0:
        return model
    gram = gram_matrix(model.basis)
    A, Z = model.A.copy(), model.Z.copy()
    M = A[1:]
    g_mm = M @ gram @ M.T
    g_0m = M @ gram @ A[0]
    coef = np.linalg.solve(g_mm, g_0m)
    A0 = A[0] - coef @ M
    Zl = Z[:, 1:] + coef
    w, vecs = np.linalg.eigh(g_mm)
    if w.min() <= 0:
        raise ValueError("factor functions are linearly dependent; cannot orthonormalize")
    root = vecs @ np.diag(np.sqrt(w)) @ vecs.T
    inv_root = vecs @ np.diag(1.0 / np.sqrt(w)) @ vecs.T
    M = inv_root @ M
    Zl = Zl @ root
    cov = np.cov(Zl, rowvar=False, ddof=1).reshape(L, L)
    cw, cv = np.linalg.eigh(cov)
    order = np.argsort(cw)[::-1]
    P = cv[:, order]
    M = P.T @ M
    Zl = Zl @ P
    signs = np.where(_factor_means(model.basis, M) < 0, -1.0, 1.0)
    M = signs[:, None] * M
    Zl = Zl * signs
    A_new = np.vstack([A0, M])
    Z_new = np.hstack([np.ones((len(Z), 1)), Zl])
    return DsfmModel(model.basis, L, A_new, Z_new, list(model.days), model.report)


def factor_surface(model: DsfmModel, l: int, grid_m, grid_t) -> np.ndarray:
    """Factor function ``m_l`` on the rectangular grid ``grid_m x grid_t``."""
    if not 0 <= l <= model.L:
        raise ValueError(f"factor index {l} outside 0..{model.L}")
    bm = _univariate_design(grid_m, model.basis.knots_m, model.basis.order_m)
    bt = _univariate_design(grid_t, model.basis.knots_t, model.basis.order_t)
    return bm @ model.A[l].reshape(model.basis.U, model.basis.V) @ bt.T


def surface_at(model: DsfmModel, z_row, grid_m, grid_t) -> np.ndarray:
    """Surface ``m_0 + sum_l z_l m_l`` on a rectangular grid."""
    z_row = np.asarray(z_row, dtype=float)
    if len(z_row) != model.L + 1 or z_row[0] != 1.0:
        raise ValueError("loading vector must have length L+1 with leading 1")
    coef = (z_row @ model.A).reshape(model.basis.U, model.basis.V)
    bm = _univariate_design(grid_m, model.basis.knots_m, model.basis.order_m)
    bt = _univariate_design(grid_t, model.basis.knots_t, model.basis.order_t)
    return bm @ coef @ bt.T


def _residuals(model: DsfmModel, panels: Sequence[DayPanel]) -> np.ndarray:
    return np.concatenate([p.y - model.predict(p) for p in panels])


def explained_variance(model: DsfmModel, panels: Sequence[DayPanel]) -> float:
    panels = list(panels)
    if not panels:
        raise ValueError("no panels")
    y = np.concatenate([p.y for p in panels])
    total = float(np.sum((y - y.mean()) ** 2))
    if total == 0:
        raise ValueError("zero total variance")
    return 1.0 - float(np.sum(_residuals(model, panels) ** 2)) / total


def rmse(model: DsfmModel, panels: Sequence[DayPanel]) -> float:
    return float(np.sqrt(np.mean(_residuals(model, list(panels)) ** 2)))


def rmspe(model: DsfmModel, z_forecast, panel_next: DayPanel) -> float:
    if len(panel_next) == 0:
        raise ValueError("empty next-day panel")
    pred = model.predict(panel_next, z_row=z_forecast)
    return float(np.sqrt(np.mean((panel_next.y - pred) ** 2)))
