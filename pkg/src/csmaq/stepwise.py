"""Bidirectional stepwise OLS on z-scored predictors."""

import warnings

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


def zscore_params(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1)
    return mean, std


def ols(Z, y):
    """OLS with intercept. Returns coef (intercept first), t-stats, p-values, R², adjusted R²."""
    n = len(y)
    A = np.column_stack([np.ones(n), Z]) if Z.size else np.ones((n, 1))
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    rss = float(resid @ resid)
    tss = float(np.sum((y - y.mean()) ** 2))
    p = A.shape[1]
    dof = n - p
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / dof if dof > 0 else -np.inf
    if rank < p or dof <= 0:
        return coef, None, None, r2, adj, rank < p
    sigma2 = rss / dof
    cov = sigma2 * np.linalg.inv(A.T @ A)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.inf * np.sign(coef))
    pv = 2.0 * stats.t.sf(np.abs(t), dof)
    return coef, t, pv, r2, adj, False


class StepwiseRegression(RegressorMixin, BaseEstimator):
    """Forward/backward selection maximizing adjusted R².

    A candidate enters only if it raises adjusted R² and its coefficient
    p-value is below the entry level; a selected term leaves if that raises
    adjusted R² or its p-value reaches ``alpha``. The entry level is
    ``alpha_enter``, divided by the number of candidates when
    ``correction="bonferroni"``, which bounds the chance that any pure-noise
    candidate enters by ``alpha_enter``. Every retained coefficient has
    p < ``alpha``. Forward ties are broken by the larger |t|, then by column
    order. Predictors are z-scored (sample standard deviation) first.
    """

    def __init__(self, alpha=0.05, alpha_enter=0.01, correction="bonferroni", max_steps=None):
        self.alpha = alpha
        self.alpha_enter = alpha_enter
        self.correction = correction
        self.max_steps = max_steps

    def level(self, n_candidates):
        """Entry significance level for `n_candidates` candidates."""
        if self.correction == "bonferroni":
            return min(self.alpha, self.alpha_enter / max(1, n_candidates))
        if self.correction in (None, "none"):
            return min(self.alpha, self.alpha_enter)
        raise ValueError(f"unknown correction {self.correction!r}")

    def _fit_subset(self, Z, y, subset):
        return ols(Z[:, subset] if subset else np.empty((len(y), 0)), y)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        n, m = X.shape
        mean, std = zscore_params(X)
        usable = np.flatnonzero(std > 0)
        Z = np.zeros_like(X)
        Z[:, usable] = (X[:, usable] - mean[usable]) / std[usable]
        level = self.level(m)
        keep = self.alpha
        selected = []
        _, _, _, _, adj, _ = self._fit_subset(Z, y, selected)
        history = [("start", None, adj)]
        seen = {()}
        max_steps = self.max_steps or 4 * m + 4
        for _ in range(max_steps):
            changed = False
            # forward
            best = None
            for j in usable:
                if j in selected:
                    continue
                trial = selected + [int(j)]
                coef, t, pv, _, a, deficient = self._fit_subset(Z, y, trial)
                if deficient or pv is None or pv[-1] >= level or a <= adj:
                    continue
                key = (a, abs(t[-1]), -j)
                if best is None or key > best[0]:
                    best = (key, int(j))
            if best is not None and tuple(sorted(selected + [best[1]])) not in seen:
                selected.append(best[1])
                adj = best[0][0]
                seen.add(tuple(sorted(selected)))
                history.append(("add", best[1], adj))
                changed = True
            # backward
            if selected:
                coef, t, pv, _, _, _ = self._fit_subset(Z, y, selected)
                worst = None
                for pos, j in enumerate(selected):
                    rest = [s for s in selected if s != j]
                    _, _, _, _, a, _ = self._fit_subset(Z, y, rest)
                    if (pv is not None and pv[pos + 1] >= keep) or a > adj:
                        key = (a, -abs(t[pos + 1]) if t is not None else 0.0)
                        if worst is None or key > worst[0]:
                            worst = (key, j)
                if worst is not None and tuple(sorted(s for s in selected if s != worst[1])) not in seen:
                    selected.remove(worst[1])
                    adj = worst[0][0]
                    seen.add(tuple(sorted(selected)))
                    history.append(("remove", worst[1], adj))
                    changed = True
            if not changed:
                break
        # final pruning of non-significant terms
        while selected:
            _, t, pv, _, a, _ = self._fit_subset(Z, y, selected)
            if pv is None:
                break
            pos = int(np.argmax(pv[1:]))
            if pv[pos + 1] < keep:
                break
            history.append(("prune", selected[pos], a))
            del selected[pos]
        if not selected:
            warnings.warn("no predictor passed selection; intercept-only model")
        selected = sorted(selected)
        coef, t, pv, r2, adj, _ = self._fit_subset(Z, y, selected)
        self.mean_ = mean
        self.scale_ = std
        self.selected_ = np.array(selected, dtype=int)
        self.intercept_ = float(coef[0])
        self.coef_ = np.asarray(coef[1:], dtype=np.float64)
        self.tvalues_ = np.asarray(t[1:]) if t is not None else np.full(len(selected), np.nan)
        self.pvalues_ = np.asarray(pv[1:]) if pv is not None else np.full(len(selected), np.nan)
        self.r2_ = r2
        self.adj_r2_ = adj
        self.level_ = level
        self.keep_level_ = keep
        self.history_ = history
        self.n_features_in_ = m
        return self

    def raw_coef(self):
        """Coefficients on the unscaled predictor scale."""
        check_is_fitted(self, "selected_")
        return self.coef_ / self.scale_[self.selected_]

    def predict(self, X):
        check_is_fitted(self, "selected_")
        X = check_array(X)
        if not len(self.selected_):
            return np.full(X.shape[0], self.intercept_)
        s = self.selected_
        return self.intercept_ + ((X[:, s] - self.mean_[s]) / self.scale_[s]) @ self.coef_
