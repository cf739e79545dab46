"""Multivariate adaptive regression splines (forward/backward MARS).

A small self-contained implementation: greedy forward selection of
reflected hinge pairs, then backward elimination scored by generalized
cross-validation (GCV).
"""

import warnings

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


def hinge(x, knot, sign):
    return np.maximum(0.0, sign * (x - knot))


def _term_column(X, term):
    col = np.ones(X.shape[0])
    for var, knot, sign in term:
        col = col * hinge(X[:, var], knot, sign)
    return col


def _rss(B, y):
    coef, *_ = np.linalg.lstsq(B, y, rcond=None)
    r = y - B @ coef
    return float(r @ r), coef


class MARSRegressor(RegressorMixin, BaseEstimator):
    """MARS regression.

    Parameters
    ----------
    max_terms : int
        Maximum number of basis terms, intercept included, after the
        forward pass.
    max_degree : int
        Maximum interaction degree (1 = additive model).
    penalty : float or None
        GCV cost per knot; defaults to 2 for additive models, 3 otherwise.
    max_knots : int
        Candidate knots per variable are subsampled to at most this many
        quantiles of the training values.
    """

    def __init__(self, max_terms=21, max_degree=1, penalty=None, max_knots=64):
        self.max_terms = max_terms
        self.max_degree = max_degree
        self.penalty = penalty
        self.max_knots = max_knots

    def _penalty(self):
        if self.penalty is not None:
            return self.penalty
        return 2.0 if self.max_degree == 1 else 3.0

    def gcv(self, rss, n_terms, n):
        c = n_terms + self._penalty() * (n_terms - 1) / 2.0
        if c >= n:
            return np.inf
        return rss / n / (1.0 - c / n) ** 2

    def _knots(self, x):
        u = np.unique(x)
        if u.size <= 2:
            return u[:-1]
        u = u[:-1]
        if u.size > self.max_knots:
            u = np.unique(np.quantile(u, np.linspace(0, 1, self.max_knots), method="nearest"))
        return u

    def _forward(self, X, y):
        n, d = X.shape
        terms = [()]
        B = np.ones((n, 1))
        knots = [self._knots(X[:, v]) for v in range(d)]
        while len(terms) < self.max_terms:
            best = None
            room = self.max_terms - len(terms)
            for parent in terms:
                if len(parent) >= self.max_degree:
                    continue
                pcol = _term_column(X, parent)
                used = {f[0] for f in parent}
                for v in range(d):
                    if v in used:
                        continue
                    for t in knots[v]:
                        pair = [parent + ((v, float(t), 1.0),), parent + ((v, float(t), -1.0),)]
                        cols = [pcol * hinge(X[:, v], t, 1.0), pcol * hinge(X[:, v], t, -1.0)]
                        if room == 1:
                            options = [([pair[0]], [cols[0]]), ([pair[1]], [cols[1]])]
                        else:
                            options = [(pair, cols)]
                        for new_terms, new_cols in options:
                            new_terms = [tm for tm, c in zip(new_terms, new_cols) if np.any(c)]
                            new_cols = [c for c in new_cols if np.any(c)]
                            if not new_cols:
                                continue
                            rss, _ = _rss(np.column_stack([B] + new_cols), y)
                            if best is None or rss < best[0] - 1e-12 * max(1.0, best[0]):
                                best = (rss, new_terms, new_cols)
            if best is None:
                break
            terms += best[1]
            B = np.column_stack([B] + best[2])
        return terms

    def _backward(self, X, y, terms):
        n = X.shape[0]
        cols = {tm: _term_column(X, tm) for tm in terms}
        current = list(terms)
        rss, _ = _rss(np.column_stack([cols[t] for t in current]), y)
        best_terms, best_gcv = list(current), self.gcv(rss, len(current), n)
        while len(current) > 1:
            trial = None
            for tm in current[1:]:
                rest = [t for t in current if t != tm]
                r, _ = _rss(np.column_stack([cols[t] for t in rest]), y)
                if trial is None or r < trial[0]:
                    trial = (r, rest)
            current = trial[1]
            g = self.gcv(trial[0], len(current), n)
            if g <= best_gcv:
                best_terms, best_gcv = list(current), g
        return best_terms, best_gcv

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")
        terms = self._forward(X, y)
        terms, gcv = self._backward(X, y, terms)
        B = np.column_stack([_term_column(X, t) for t in terms])
        _, coef = _rss(B, y)
        self.terms_ = terms
        self.coef_ = coef
        self.gcv_ = gcv
        self.n_features_in_ = X.shape[1]
        return self

    def basis(self, X):
        check_is_fitted(self, "terms_")
        X = check_array(X)
        return np.column_stack([_term_column(X, t) for t in self.terms_])

    def predict(self, X):
        return self.basis(X) @ self.coef_

    def describe(self, names=None):
        names = names or [f"x{i}" for i in range(self.n_features_in_)]
        out = []
        for c, tm in zip(self.coef_, self.terms_):
            fac = "*".join(f"max(0, {names[v]}-{k:.4g})" if s > 0 else f"max(0, {k:.4g}-{names[v]})"
                           for v, k, s in tm)
            out.append(f"{c:+.4g}" + (f"*{fac}" if fac else ""))
        return " ".join(out)


def univariate_hinges(model, x_min):
    """Rewrite a fitted 1-D additive MARS model as intercept + right hinges.

    On ``x >= x_min`` a left hinge ``max(0, t - x)`` equals
    ``(t - x_min) - max(0, x - x_min) + max(0, x - t)``, so every model can
    be expressed with right hinges only (one of them anchored at ``x_min``).
    Returns ``(intercept, knots, slopes)`` with knots sorted and merged.
    """
    check_is_fitted(model, "terms_")
    if model.n_features_in_ != 1 or any(len(t) > 1 for t in model.terms_):
        raise ValueError("expected an additive univariate model")
    intercept = 0.0
    slopes = {}
    for c, tm in zip(model.coef_, model.terms_):
        if not tm:
            intercept += c
            continue
        _, t, s = tm[0]
        if s > 0:
            if t <= x_min:
                intercept += c * (x_min - t)
                slopes[x_min] = slopes.get(x_min, 0.0) + c
            else:
                slopes[t] = slopes.get(t, 0.0) + c
        else:
            if t <= x_min:
                continue
            intercept += c * (t - x_min)
            slopes[x_min] = slopes.get(x_min, 0.0) - c
            slopes[t] = slopes.get(t, 0.0) + c
    knots = sorted(k for k, v in slopes.items() if v != 0.0)
    if len(knots) > 3:
        warnings.warn("more than three hinges in univariate model")
    return intercept, [float(k) for k in knots], [float(slopes[k]) for k in knots]
