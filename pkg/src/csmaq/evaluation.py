"""Validation of objective scores against subjective scores."""

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import CsmaqError, check_same_length, check_vector

N_BOOTSTRAP = 2000
DEFAULT_BOOTSTRAP_SEED = 0
MONOTONE_GRID = 1001
OUTLIER_TOL = 1e-9


def pearson_r(x, y):
    """Sample Pearson correlation; raises on constant input or fewer than 3 values."""
    x = check_vector(x, "x", min_len=3)
    y = check_vector(y, "y", min_len=3)
    check_same_length(x, y, names=["x", "y"])
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise CsmaqError("pearson_r: constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def rmse(x, y):
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def bootstrap_r_ci(x, y, n_boot=N_BOOTSTRAP, seed=DEFAULT_BOOTSTRAP_SEED, level=0.95):
    """Percentile bootstrap confidence interval of the Pearson correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    xs, ys = x[idx], y[idx]
    dx = xs - xs.mean(axis=1, keepdims=True)
    dy = ys - ys.mean(axis=1, keepdims=True)
    den = np.sqrt(np.sum(dx * dx, axis=1) * np.sum(dy * dy, axis=1))
    ok = den > 0
    r = np.clip(np.sum(dx * dy, axis=1)[ok] / den[ok], -1, 1)
    if r.size == 0:
        return (float("nan"), float("nan"))
    a = (1 - level) / 2
    return (float(np.quantile(r, a)), float(np.quantile(r, 1 - a)))


def _poly_to_raw(b, c, s):
    """Coefficients of sum b_k ((x - c) / s)^k as a polynomial in x (ascending)."""
    a = np.zeros(len(b))
    for k, bk in enumerate(b):
        for j in range(k + 1):
            a[j] += bk * comb(k, j) * (-c) ** (k - j) / s ** k
    return a


def _min_derivative(b, lo, hi):
    """Minimum over [lo, hi] of d/du (b0 + b1 u + b2 u^2 + b3 u^3)."""
    pts = [lo, hi]
    if b[3] != 0:
        v = -b[2] / (3 * b[3])
        if lo < v < hi:
            pts.append(v)
    return min(b[1] + 2 * b[2] * u + 3 * b[3] * u * u for u in pts)


class ThirdOrderMapper(RegressorMixin, BaseEstimator):
    """Least-squares cubic mapping, constrained to be non-decreasing on the data range.

    The fit is done on standardized input. When the unconstrained optimum
    is not monotone, a constrained refit imposes a positive derivative on a
    dense grid; the result is checked analytically and, if needed, blended
    toward a strictly increasing starting point. The mapping is never worse
    (in squared error) than the identity.
    """

    def __init__(self, grid=MONOTONE_GRID):
        self.grid = grid

    def fit(self, x, y):
        x = check_vector(x, "objective", min_len=4)
        y = check_vector(y, "subjective", min_len=4)
        check_same_length(x, y, names=["objective", "subjective"])
        c, s = float(x.mean()), float(x.std())
        if s == 0:
            raise CsmaqError("degenerate objective scores (zero variance)")
        u = (x - c) / s
        lo, hi = float(u.min()), float(u.max())
        A = np.vander(u, 4, increasing=True)

        def sse(b):
            r = A @ b - y
            return float(r @ r)

        identity = np.array([c, s, 0.0, 0.0])
        b, *_ = np.linalg.lstsq(A, y, rcond=None)
        self.constrained_ = False
        if _min_derivative(b, lo, hi) < 0:
            self.constrained_ = True
            lin, *_ = np.linalg.lstsq(A[:, :2], y, rcond=None)
            start = np.array([lin[0], lin[1], 0.0, 0.0]) if lin[1] > 0 else identity
            ug = np.linspace(lo, hi, self.grid)
            D = np.column_stack([np.zeros_like(ug), np.ones_like(ug), 2 * ug, 3 * ug * ug])
            eps = 1e-9 * max(1.0, abs(start[1]))
            res = minimize(sse, start, jac=lambda b: 2 * A.T @ (A @ b - y), method="SLSQP",
                           constraints=[{"type": "ineq", "fun": lambda b: D @ b - eps,
                                         "jac": lambda b: D}],
                           options={"maxiter": 500, "ftol": 1e-12})
            b = res.x
            if _min_derivative(b, lo, hi) < 0:
                # derivative is linear in the coefficients: bisect toward `start`
                w_lo, w_hi = 0.0, 1.0
                for _ in range(60):
                    mid = 0.5 * (w_lo + w_hi)
                    if _min_derivative(mid * b + (1 - mid) * start, lo, hi) >= 0:
                        w_lo = mid
                    else:
                        w_hi = mid
                b = w_lo * b + (1 - w_lo) * start
            if sse(b) > sse(start):
                b = start
        if sse(b) > sse(identity):
            b = identity
        self.center_, self.scale_ = c, s
        self.ucoef_ = b
        self.coef_ = _poly_to_raw(b, c, s)
        self.range_ = (float(x.min()), float(x.max()))
        self.rmse_ = float(np.sqrt(sse(b) / len(y)))
        return self

    def predict(self, x):
        check_is_fitted(self, "ucoef_")
        u = (np.asarray(x, dtype=np.float64) - self.center_) / self.scale_
        b = self.ucoef_
        return b[0] + u * (b[1] + u * (b[2] + u * b[3]))

    def min_derivative(self):
        """Minimum slope (in x units) over the fitted range."""
        check_is_fitted(self, "ucoef_")
        lo, hi = ((np.array(self.range_) - self.center_) / self.scale_).tolist()
        return _min_derivative(self.ucoef_, lo, hi) / self.scale_


def fit_third_order_monotone(objective, subjective):
    """Return ``(coefficients, mapped_rmse)``; coefficients ascending in x."""
    m = ThirdOrderMapper().fit(objective, subjective)
    return m.coef_, m.rmse_


@dataclass
class EvaluationReport:
    name: str
    n_items: int
    r: float
    rmse: float
    r_ci: tuple
    mapped_r: float
    mapped_rmse: float
    mapping: list
    mapping_constrained: bool
    outliers: int
    bootstrap_seed: int
    residuals: list = field(repr=False)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["r_ci"] = list(self.r_ci)
        return d

    def to_text(self):
        lines = [f"database: {self.name}", f"items: {self.n_items}",
                 f"R: {self.r:.6f}  (95% CI {self.r_ci[0]:.4f} .. {self.r_ci[1]:.4f}, "
                 f"bootstrap seed {self.bootstrap_seed})",
                 f"RMSE: {self.rmse:.6f}",
                 f"mapped R: {self.mapped_r:.6f}", f"mapped RMSE: {self.mapped_rmse:.6f}",
                 "mapping: y = " + " + ".join(f"{a:.6g}*x^{k}" for k, a in enumerate(self.mapping))
                 + (" (constrained)" if self.mapping_constrained else ""),
                 f"outliers (|residual| > 2*mapped RMSE): {self.outliers}"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, fmt="text"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        if fmt == "text":
            with open(os.path.join(out_dir, "report.txt"), "w") as fh:
                fh.write(self.to_text())
        cols = ["key", "objective", "subjective", "mapped", "residual", "outlier"]
        with open(os.path.join(out_dir, "residuals.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.residuals:
                w.writerow([row[c] if not isinstance(row[c], float) else repr(row[c]) for c in cols])
        with open(os.path.join(out_dir, "scatter.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "mapped_y"])
            for row in self.residuals:
                w.writerow([repr(row["objective"]), repr(row["subjective"]), repr(row["mapped"])])


def evaluate_scores(objective, subjective, keys=None, name="", bootstrap_seed=DEFAULT_BOOTSTRAP_SEED,
                    n_boot=N_BOOTSTRAP, config=None):
    """Correlation, error, bootstrap CI and monotone mapping for score vectors."""
    if np.size(objective) == 0:
        raise CsmaqError("empty database")
    x = check_vector(objective, "objective")
    y = check_vector(subjective, "subjective")
    check_same_length(x, y, names=["objective", "subjective"])
    keys = list(keys) if keys is not None else [str(i) for i in range(len(x))]
    r = pearson_r(x, y)
    mapper = ThirdOrderMapper().fit(x, y)
    mapped = mapper.predict(x)
    mapped_rmse = rmse(mapped, y)
    resid = y - mapped
    # the tolerance keeps round-off residuals of an exact fit from counting as outliers
    flags = np.abs(resid) > 2 * mapped_rmse + OUTLIER_TOL * max(1.0, float(np.max(np.abs(y))))
    rows = [{"key": k, "objective": float(a), "subjective": float(b), "mapped": float(m),
             "residual": float(e), "outlier": bool(f)}
            for k, a, b, m, e, f in zip(keys, x, y, mapped, resid, flags)]
    mapped_r = pearson_r(mapped, y) if np.ptp(mapped) > 0 else float("nan")
    return EvaluationReport(name, len(x), r, rmse(x, y), bootstrap_r_ci(x, y, n_boot, bootstrap_seed),
                            mapped_r, mapped_rmse, mapper.coef_.tolist(), mapper.constrained_,
                            int(flags.sum()), bootstrap_seed, rows, dict(config or {}))
