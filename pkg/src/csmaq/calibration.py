"""Fitting a cognitive salience model from listening-test data.

Steps: basis functions on the isolated-artifact split, per-signal salience
of every DM on the interaction split, DPW grid search against the
interaction metric, then stepwise selection of quality predictors.
"""

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import lsq_linear
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import CsmaqError, check_same_length, check_vector
from .csm import (BasisFunction, CsmModel, Dpw, DpwFactor, QualityTerm, eval_bf, exact_mean,
                  score)
from .evaluation import pearson_r, rmse
from .features import CEM_NAMES, DM_NAMES
from .mars import MARSRegressor, univariate_hinges
from .stepwise import StepwiseRegression

STEEPNESS_GRID = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
N_MIDPOINTS = 41
MIN_BF_SAMPLES = 10
MIN_TREATMENTS = 3
MIN_SIGNALS = 3
EPN, PDEV = CEM_NAMES.index("EPN"), CEM_NAMES.index("PDEV")
COMPOSITE_TARGETS = ("SegNMR", "NoiseLoudness")


# --- basis functions -------------------------------------------------------------

def _monotone_refit(x, y, knots):
    """Least squares on fixed knots with every segment slope <= 0."""
    k = np.sort(np.asarray(knots, dtype=np.float64))
    ends = np.append(k[1:], x.max())
    cols = [np.ones_like(x)] + [np.clip(x, a, b) - a for a, b in zip(k, ends)]
    A = np.column_stack(cols)
    lb = np.r_[-np.inf, np.full(len(k), -np.inf)]
    ub = np.r_[np.inf, np.zeros(len(k))]
    res = lsq_linear(A, y, bounds=(lb, ub), method="bvls")
    g = np.minimum(res.x[1:], 0.0)
    slopes = np.diff(np.r_[0.0, g])
    return float(res.x[0]), k, slopes


def fit_basis_function(x, y, dm_index, max_terms=3):
    """Monotone non-increasing MARS spline from item-mean DM values to scores.

    The MARS fit (at most `max_terms` terms including the intercept) is
    rewritten as intercept + right hinges; if any segment rises, the hinge
    slopes are refitted on the same knots under the constraint that every
    segment slope is non-positive.
    """
    x = check_vector(x, "dm values")
    y = check_vector(y, "scores")
    check_same_length(x, y, names=["dm values", "scores"])
    if x.size < MIN_BF_SAMPLES:
        raise CsmaqError(f"basis function needs at least {MIN_BF_SAMPLES} samples, got {x.size}")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return BasisFunction(dm_index, float(np.mean(y)), (), (), lo, hi)
    mars = MARSRegressor(max_terms=max_terms, max_degree=1).fit(x[:, None], y)
    intercept, knots, slopes = univariate_hinges(mars, lo)
    seg = np.cumsum(slopes)
    if np.any(seg > 0):
        intercept, knots, slopes = _monotone_refit(x, y, knots)
    keep = [i for i, s in enumerate(slopes) if s != 0.0]
    knots = tuple(float(knots[i]) for i in keep)
    slopes = tuple(float(slopes[i]) for i in keep)
    return BasisFunction(dm_index, float(intercept), knots, slopes, lo, hi)


# --- salience and interaction metric -------------------------------------------------

def _signal_order(groups):
    ids = []
    for g in groups:
        if g not in ids:
            ids.append(g)
    return ids


def compute_salience(bf_outputs, scores, groups):
    """Per-signal Pearson correlation between scores and BF outputs.

    Returns ``(S_row, signal_ids)``; cells with fewer than three treatments
    or zero variance are NaN (undefined).
    """
    b = np.asarray(bf_outputs, dtype=np.float64)
    y = np.asarray(scores, dtype=np.float64)
    groups = np.asarray(groups)
    ids = _signal_order(groups.tolist())
    out = np.full(len(ids), np.nan)
    for j, sid in enumerate(ids):
        m = groups == sid
        if m.sum() < MIN_TREATMENTS or np.ptp(b[m]) == 0 or np.ptp(y[m]) == 0:
            continue
        out[j] = pearson_r(y[m], b[m])
    return out, ids


def _masked(s, v):
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ok = np.isfinite(s) & np.isfinite(v)
    return s[ok], v[ok]


def correlation_pvalue(r, n):
    """Two-sided p-value of a sample correlation `r` over `n` pairs (t test, n - 2 dof)."""
    if n < 3:
        return 1.0
    r = min(abs(float(r)), 1.0)
    if r == 1.0:
        return 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(t, n - 2))


def signed_interaction(s_row, dpw_values):
    s, v = _masked(s_row, dpw_values)
    if s.size < MIN_SIGNALS or np.ptp(s) == 0 or np.ptp(v) == 0:
        return float("nan")
    return pearson_r(s, v)


def interaction_metric(s_row, dpw_values):
    """|Pearson| across signals between salience and DPW values; NaN if undefined."""
    return abs(signed_interaction(s_row, dpw_values))


def _rows_corr(W, s):
    """Pearson of each row of W with s; NaN for (numerically) constant rows."""
    Wc = W - W.mean(axis=1, keepdims=True)
    sc = s - s.mean()
    num = Wc @ sc
    den = np.sqrt(np.sum(Wc * Wc, axis=1) * (sc @ sc))
    flat = np.ptp(W, axis=1) <= 1e-9
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(flat | (den == 0), np.nan, num / den)
    return np.clip(r, -1.0, 1.0)


@dataclass
class InteractionCandidate:
    id: str
    source: str
    dm_index: int
    dpw: Dpw
    c_before: float
    c_after: float
    signed_r: float

    @property
    def inverted(self):
        return self.dpw.inverted

    @property
    def dm(self):
        return DM_NAMES[self.dm_index]

    @property
    def label(self):
        return f"{self.id}*{self.dm}_Q"

    def row(self):
        f = self.dpw.factors
        return {"id": self.id, "cem": self.source, "dm": self.dm,
                "c_before": self.c_before, "c_after": self.c_after, "inverted": self.inverted,
                "params": "; ".join(f"{x.name}:{x.kind}(k={x.steepness:.6g}, m={x.midpoint:.6g}"
                                    f"{', inv' if x.inverted else ''})" for x in f)}


def _ramp(cem_index, x):
    lo, hi = float(np.min(x)), float(np.max(x))
    return DpwFactor(cem_index, 1.0 / (hi - lo), lo, False, "ramp")


def _factor_bank(cem_index, x, steepness, n_mid, with_inverse):
    """All grid factors for one CEM and their values at `x` (rows)."""
    rng = np.ptp(x)
    mids = np.quantile(x, np.linspace(0.0, 1.0, n_mid))
    factors, rows = [], []
    ramp = _ramp(cem_index, x)
    for inv in ((False, True) if with_inverse else (False,)):
        f = DpwFactor(cem_index, ramp.steepness, ramp.midpoint, inv, "ramp")
        factors.append(f)
        rows.append(f(x))
    for k in steepness:
        for m in mids:
            for inv in ((False, True) if with_inverse else (False,)):
                f = DpwFactor(cem_index, float(k / rng), float(m), inv)
                factors.append(f)
                rows.append(f(x))
    return factors, np.vstack(rows)


def optimize_dpw(cem_means, s_row, cem_index=0, dm_index=0, cid="DPW", steepness=STEEPNESS_GRID,
                 n_midpoints=N_MIDPOINTS):
    """Exhaustive DPW search maximizing the interaction metric.

    Steepness values are relative to the CEM range (``k / ptp(cem)``) and
    midpoints are quantiles of the CEM values. Negative steepness is covered
    by the inverted flag, since ``sigmoid(-k(c-m)) = 1 - sigmoid(k(c-m))``.
    The grid also holds the linear limit of the family (a ramp over the CEM
    range), whose metric is ``c_before``, so ``c_after >= c_before`` always.
    """
    if np.size(s_row) < MIN_SIGNALS:
        raise CsmaqError("insufficient signals for interaction metric")
    s, x = _masked(s_row, cem_means)
    if s.size < MIN_SIGNALS:
        raise CsmaqError(f"interaction metric undefined: fewer than {MIN_SIGNALS} defined salience values")
    if np.ptp(x) == 0 or np.ptp(s) == 0:
        raise CsmaqError("interaction metric undefined: constant CEM or salience")
    factors, W = _factor_bank(cem_index, x, steepness, n_midpoints, with_inverse=False)
    r = _rows_corr(W, s)
    c = np.abs(r)
    if np.all(np.isnan(c)):
        raise CsmaqError("interaction metric undefined on the whole grid")
    best = int(np.nanargmax(c))
    c_before = float(c[0])
    f = factors[best]
    dpw = Dpw(cid, (f,), inverted=bool(r[best] < 0))
    return InteractionCandidate(cid, CEM_NAMES[cem_index], dm_index, dpw, c_before, float(c[best]),
                                float(r[best]))


def optimize_composite(cem_a, cem_b, s_row, dm_index=0, cid="DPW", index_a=EPN, index_b=PDEV,
                       steepness=STEEPNESS_GRID, n_midpoints=N_MIDPOINTS):
    """Joint search over products of two DPWs (EPN/PDEV composite).

    Each factor ranges over its sigmoid grid, both orientations, its ramp
    and the constant 1, so the single-CEM ramps are members of the family
    and ``c_after >= c_before = max(single-CEM c_before)``.
    """
    a = np.asarray(cem_a, dtype=np.float64)
    b = np.asarray(cem_b, dtype=np.float64)
    s = np.asarray(s_row, dtype=np.float64)
    if s.size < MIN_SIGNALS:
        raise CsmaqError("insufficient signals for interaction metric")
    ok = np.isfinite(a) & np.isfinite(b) & np.isfinite(s)
    a, b, s = a[ok], b[ok], s[ok]
    if s.size < MIN_SIGNALS:
        raise CsmaqError(f"interaction metric undefined: fewer than {MIN_SIGNALS} defined salience values")
    banks = []
    for idx, x in ((index_a, a), (index_b, b)):
        if np.ptp(x) == 0:
            banks.append(([None], np.ones((1, x.size))))
            continue
        f, W = _factor_bank(idx, x, steepness, n_midpoints, with_inverse=True)
        banks.append(([None] + f, np.vstack([np.ones(x.size), W])))
    (fa, Wa), (fb, Wb) = banks
    befores = [interaction_metric(s, Wa[1]) if len(fa) > 1 else np.nan,
               interaction_metric(s, Wb[1]) if len(fb) > 1 else np.nan]
    if np.all(np.isnan(befores)):
        raise CsmaqError("interaction metric undefined: constant CEMs or salience")
    c_before = float(np.nanmax(befores))
    best = (-1.0, None, None, 0.0)
    for i in range(len(fa)):
        r = _rows_corr(Wa[i] * Wb, s)
        c = np.abs(r)
        if np.all(np.isnan(c)):
            continue
        j = int(np.nanargmax(c))
        if c[j] > best[0]:
            best = (float(c[j]), i, j, float(r[j]))
    factors = tuple(f for f in (fa[best[1]], fb[best[2]]) if f is not None)
    dpw = Dpw(cid, factors, inverted=bool(best[3] < 0))
    return InteractionCandidate(cid, f"{CEM_NAMES[index_a]}/{CEM_NAMES[index_b]}", dm_index, dpw,
                                c_before, best[0], best[3])


# --- stepwise selection and the estimator ------------------------------------------

def item_predictor(features, bf, dpw=None):
    """Time mean of DPW(cem(n)) * BF(dm(n)) for one item (the frame-level predictor's mean)."""
    p = eval_bf(bf, features.dm[:, bf.dm_index])
    if dpw is not None:
        p = dpw(features.cem) * p
    return exact_mean(p)


@dataclass
class CalibrationReport:
    signal_ids: list
    salience: np.ndarray
    candidates: list
    selected: list
    fit_r: float
    fit_rmse: float
    adj_r2: float
    n_bf_items: int
    n_interaction_items: int
    entry_level: float
    warnings: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def candidate_rows(self):
        return [c.row() for c in self.candidates]

    def to_dict(self):
        return {"fit_r": self.fit_r, "fit_rmse": self.fit_rmse, "adj_r2": self.adj_r2,
                "n_bf_items": self.n_bf_items, "n_interaction_items": self.n_interaction_items,
                "entry_level": self.entry_level, "warnings": list(self.warnings),
                "signal_ids": list(self.signal_ids),
                "salience": {DM_NAMES[m]: [None if np.isnan(v) else float(v) for v in row]
                             for m, row in enumerate(self.salience)},
                "candidates": self.candidate_rows(), "selected": self.selected,
                "config": self.config}

    def to_text(self):
        lines = ["DPW candidates (interaction metric before/after optimization)",
                 f"{'id':<7}{'CEM':<11}{'DM':<15}{'C before':>10}{'C after':>10}  inverted"]
        for c in self.candidates:
            lines.append(f"{c.id:<7}{c.source:<11}{c.dm:<15}{c.c_before:>10.3f}{c.c_after:>10.3f}"
                         f"  {'yes' if c.inverted else 'no'}")
        lines += ["", "Selected quality terms",
                  f"{'term':<5}{'predictor':<26}{'CEM':<11}{'coef':>9}{'p':>11}"]
        for row in self.selected:
            p = "" if row["p"] is None else f"{row['p']:.2e}"
            lines.append(f"{row['id']:<5}{row['label']:<26}{row['cem']:<11}{row['coefficient']:>9.3f}{p:>11}")
        lines += ["", f"fit R = {self.fit_r:.3f}, RMSE = {self.fit_rmse:.3f}, adjusted R2 = {self.adj_r2:.3f}"]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"

    def write_tables(self, candidates_csv, coefficients_csv):
        with open(candidates_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["id", "cem", "dm", "c_before", "c_after", "inverted", "params"],
                               lineterminator="\n")
            w.writeheader()
            for r in self.candidate_rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        with open(coefficients_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["id", "label", "cem", "coefficient", "p", "t"], lineterminator="\n")
            w.writeheader()
            for r in self.selected:
                w.writerow({k: repr(v) if isinstance(v, float) else ("" if v is None else v)
                            for k, v in r.items()})


class CognitiveSalienceRegressor(RegressorMixin, BaseEstimator):
    """Calibrate a :class:`CsmModel` from item features and mean scores.

    ``fit(X, y, groups, bf_mask)``: `X` is a list of FeatureSeries, `y` the
    mean scores on the MUSHRA scale, `groups` the signal id of each item
    and `bf_mask` marks the items of the isolated-artifact split used for
    the basis functions; the remaining items form the interaction split.
    """

    def __init__(self, alpha=0.05, alpha_enter=0.01, correction="bonferroni", max_bf_terms=3,
                 steepness=STEEPNESS_GRID, n_midpoints=N_MIDPOINTS, composites=True,
                 candidate_alpha=0.05):
        self.alpha = alpha
        self.alpha_enter = alpha_enter
        self.correction = correction
        self.max_bf_terms = max_bf_terms
        self.steepness = steepness
        self.n_midpoints = n_midpoints
        self.composites = composites
        self.candidate_alpha = candidate_alpha

    def fit(self, X, y, groups, bf_mask):
        X = list(X)
        y = check_vector(y, "scores")
        groups = np.asarray(groups)
        bf_mask = np.asarray(bf_mask, dtype=bool)
        check_same_length(X, y, groups, bf_mask, names=["features", "scores", "groups", "bf_mask"])
        if not bf_mask.any():
            raise CsmaqError("missing split: no basis-function (isolated artifact) items")
        if bf_mask.all():
            raise CsmaqError("missing split: no interaction items")
        hashes = {f.config_hash for f in X}
        if len(hashes) > 1:
            raise CsmaqError("features computed with different front-end configurations")
        notes = []

        # 1. basis functions on split A
        dm_bf = np.vstack([f.item_mean_dm for f, m in zip(X, bf_mask) if m])
        bfs = tuple(fit_basis_function(dm_bf[:, m], y[bf_mask], m, self.max_bf_terms)
                    for m in range(len(DM_NAMES)))

        # 2. salience and per-signal CEM means on split B
        Xi = [f for f, m in zip(X, bf_mask) if not m]
        yi = y[~bf_mask]
        gi = groups[~bf_mask]
        ids = _signal_order(gi.tolist())
        if len(ids) < MIN_SIGNALS:
            raise CsmaqError("insufficient signals for interaction metric "
                             f"(need {MIN_SIGNALS}, got {len(ids)})")
        dm_i = np.vstack([f.item_mean_dm for f in Xi])
        cem_i = np.vstack([f.item_mean_cem for f in Xi])
        S = np.vstack([compute_salience(bfs[m](dm_i[:, m]), yi, gi)[0] for m in range(len(DM_NAMES))])
        cem_means = np.vstack([cem_i[gi == sid].mean(axis=0) for sid in ids])

        # 3. DPW candidates
        candidates = []
        # ids follow grid position, so a rejected candidate does not renumber the rest
        for c in range(len(CEM_NAMES)):
            for m in range(len(DM_NAMES)):
                cid = f"DPW{c * len(DM_NAMES) + m + 1}"
                try:
                    candidates.append(optimize_dpw(cem_means[:, c], S[m], c, m, cid,
                                                   self.steepness, self.n_midpoints))
                except CsmaqError as exc:
                    notes.append(f"{cid} ({CEM_NAMES[c]}/{DM_NAMES[m]}) rejected: {exc}")
        if self.composites:
            for k, name in enumerate(COMPOSITE_TARGETS):
                m = DM_NAMES.index(name)
                cid = f"DPW{len(CEM_NAMES) * len(DM_NAMES) + k + 1}"
                try:
                    candidates.append(optimize_composite(cem_means[:, EPN], cem_means[:, PDEV], S[m], m,
                                                         cid, EPN, PDEV, self.steepness, self.n_midpoints))
                except CsmaqError as exc:
                    notes.append(f"{cid} (EPN/PDEV/{name}) rejected: {exc}")

        # 4. screening: only interactions whose salience correlation is significant
        # (Bonferroni over candidates) enter the regression
        level = self.candidate_alpha / max(1, len(candidates)) if self.candidate_alpha else None
        screened = [c for c in candidates if level is None or correlation_pvalue(c.c_after, len(ids)) < level]
        kept = {c.id for c in screened}
        for c in candidates:
            if c.id not in kept:
                notes.append(f"{c.id} ({c.label}) screened out: C = {c.c_after:.3f}")

        # 5. stepwise selection over plain BF and DPW*BF predictors
        specs = [(m, None) for m in range(len(DM_NAMES))] + [(c.dm_index, c.dpw) for c in screened]
        P = np.array([[item_predictor(f, bfs[m], dpw) for m, dpw in specs] for f in Xi])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sw = StepwiseRegression(self.alpha, self.alpha_enter, self.correction).fit(P, yi)
        notes += [str(w.message) for w in caught]

        terms = [QualityTerm("Q0", float(sw.intercept_))]
        selected = [{"id": "Q0", "label": "intercept", "cem": "", "coefficient": float(sw.intercept_),
                     "p": None, "t": None}]
        for k, (j, coef) in enumerate(zip(sw.selected_, sw.coef_)):
            m, dpw = specs[j]
            term = QualityTerm(f"Q{k + 1}", float(coef), m, dpw, float(sw.mean_[j]), float(sw.scale_[j]))
            terms.append(term)
            selected.append({"id": term.id, "label": term.label, "cem": dpw.source if dpw else "none",
                             "coefficient": float(coef), "p": float(sw.pvalues_[k]),
                             "t": float(sw.tvalues_[k])})
        config_hash = next(iter(hashes))
        model = CsmModel(bfs, tuple(terms), config_hash)
        pred = np.array([score(f, model).score for f in Xi])
        fit_r = pearson_r(pred, yi) if np.ptp(pred) > 0 else float("nan")
        fit_rmse = rmse(pred, yi)
        report = CalibrationReport(ids, S, candidates, selected, fit_r, fit_rmse, float(sw.adj_r2_),
                                   int(bf_mask.sum()), int((~bf_mask).sum()), float(sw.level_), notes,
                                   self.get_params())
        provenance = {"fit_r": fit_r, "fit_rmse": fit_rmse, "adj_r2": float(sw.adj_r2_),
                      "n_bf_items": report.n_bf_items, "n_interaction_items": report.n_interaction_items,
                      "n_signals": len(ids), "calibration": _jsonable(self.get_params())}
        self.model_ = CsmModel(bfs, tuple(terms), config_hash, provenance)
        self.report_ = report
        self.stepwise_ = sw
        self.candidates_ = candidates
        self.predictor_specs_ = specs
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return np.array([score(f, self.model_).score for f in X])


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
