"""Cognitive salience model: basis functions, detection probability weights
and the per-frame quality-term sum.

A model is immutable once built; :func:`score` maps a :class:`FeatureSeries`
to a per-frame quality series and its clamped time mean.
"""

import json
import math
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from ._validation import CsmaqError
from .features import CEM_NAMES, DM_NAMES

MODEL_FORMAT = "csmaq-model"
MODEL_VERSION = "1.0.0"
SCORE_RANGE = (0.0, 100.0)


@dataclass(frozen=True)
class BasisFunction:
    """Piecewise-linear spline ``intercept + sum slope_i * max(0, x - knot_i)``.

    Inputs are clipped to ``[x_min, x_max]`` (the training range) before
    evaluation, so the boundary values extend as constants. ``None`` bounds
    disable clipping on that side.
    """

    dm_index: int
    intercept: float
    knots: tuple = ()
    slopes: tuple = ()
    x_min: float = None
    x_max: float = None

    def __post_init__(self):
        if len(self.knots) != len(self.slopes):
            raise CsmaqError("basis function knots and slopes differ in length")
        if len(self.knots) > 3:
            raise CsmaqError("basis function has more than three hinges")
        if not 0 <= self.dm_index < len(DM_NAMES):
            raise CsmaqError(f"invalid dm_index {self.dm_index}")

    @property
    def name(self):
        return DM_NAMES[self.dm_index]

    def __call__(self, x):
        return eval_bf(self, x)

    def segment_slopes(self):
        """Slopes on consecutive segments between sorted knots (after the first)."""
        order = np.argsort(self.knots)
        return np.cumsum(np.asarray(self.slopes, dtype=np.float64)[order])

    @property
    def n_parameters(self):
        return 1 + 2 * len(self.knots)


def eval_bf(bf, x):
    x = np.asarray(x, dtype=np.float64)
    lo = -np.inf if bf.x_min is None else bf.x_min
    hi = np.inf if bf.x_max is None else bf.x_max
    xc = np.clip(x, lo, hi)
    out = np.full(xc.shape, float(bf.intercept))
    if not bf.knots:
        return out
    # evaluate segment by segment from the values at the knots: with non-positive
    # segment slopes the result is then non-increasing even under rounding, which
    # a sum of opposing hinges is not
    k = np.sort(np.asarray(bf.knots, dtype=np.float64))
    seg = bf.segment_slopes()
    at_knot = np.empty(k.size)
    at_knot[0] = bf.intercept
    for i in range(1, k.size):
        at_knot[i] = at_knot[i - 1] + seg[i - 1] * (k[i] - k[i - 1])
    j = np.searchsorted(k, xc, side="right") - 1
    inside = j >= 0
    j = j[inside]
    out[inside] = at_knot[j] + seg[j] * (xc[inside] - k[j])
    return out


@dataclass(frozen=True)
class DpwFactor:
    """One psychometric function of a CEM.

    ``kind="sigmoid"``: ``1 / (1 + exp(-steepness * (c - midpoint)))``.
    ``kind="ramp"``: ``clip((c - lo) / (hi - lo), 0, 1)``, the linear
    limit of the sigmoid family over a training range; ``midpoint`` holds
    ``lo`` and ``steepness`` holds ``1 / (hi - lo)``.
    ``inverted`` returns ``1 - w``.
    """

    cem_index: int
    steepness: float
    midpoint: float
    inverted: bool = False
    kind: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in ("sigmoid", "ramp"):
            raise CsmaqError(f"unknown DPW kind {self.kind!r}")
        if not 0 <= self.cem_index < len(CEM_NAMES):
            raise CsmaqError(f"invalid cem_index {self.cem_index}")

    @property
    def name(self):
        return CEM_NAMES[self.cem_index]

    def __call__(self, c):
        return eval_dpw(self, c)


def sigmoid(u):
    """Logistic function without overflow warnings."""
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(-np.abs(u))
    return np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def eval_dpw(dpw, c):
    c = np.asarray(c, dtype=np.float64)
    if dpw.kind == "sigmoid":
        w = sigmoid(dpw.steepness * (c - dpw.midpoint))
    else:
        w = np.clip((c - dpw.midpoint) * dpw.steepness, 0.0, 1.0)
    return 1.0 - w if dpw.inverted else w


@dataclass(frozen=True)
class Dpw:
    """Detection probability weight: product of factors, optionally inverted.

    A single-CEM DPW has one factor; the EPN/PDEV composite has two.
    """

    id: str
    factors: tuple
    inverted: bool = False

    def __call__(self, cem):
        """Weights for a CEM matrix (T x 3) or a single CEM vector (3,)."""
        cem = np.asarray(cem, dtype=np.float64)
        w = np.ones(cem.shape[:-1])
        for f in self.factors:
            w = w * eval_dpw(f, cem[..., f.cem_index])
        return 1.0 - w if self.inverted else w

    @property
    def source(self):
        return "/".join(f.name for f in self.factors)

    @property
    def n_parameters(self):
        return 2 * len(self.factors)


@dataclass(frozen=True)
class QualityTerm:
    """Term ``coefficient * (p - z_mean) / z_std``; the intercept has no predictor."""

    id: str
    coefficient: float
    bf: int = None
    dpw: Dpw = None
    z_mean: float = 0.0
    z_std: float = 1.0

    @property
    def is_intercept(self):
        return self.bf is None

    @property
    def label(self):
        if self.is_intercept:
            return "intercept"
        bf = f"{DM_NAMES[self.bf]}_Q"
        return f"{self.dpw.id}*{bf}" if self.dpw is not None else bf


@dataclass(frozen=True)
class CsmModel:
    basis_functions: tuple
    terms: tuple
    config_hash: str = ""
    provenance: dict = field(default_factory=dict, compare=False, hash=False)
    version: str = MODEL_VERSION

    def __post_init__(self):
        if len(self.basis_functions) != len(DM_NAMES):
            raise CsmaqError(f"model needs {len(DM_NAMES)} basis functions")
        if [b.dm_index for b in self.basis_functions] != list(range(len(DM_NAMES))):
            raise CsmaqError("basis functions must be ordered by DM index")
        if not self.terms or not self.terms[0].is_intercept:
            raise CsmaqError("first term must be the intercept")
        for t in self.terms[1:]:
            if t.is_intercept:
                raise CsmaqError(f"term {t.id} has no predictor")
            if not 0 <= t.bf < len(DM_NAMES):
                raise CsmaqError(f"term {t.id} references missing basis function {t.bf}")
            if not (t.z_std > 0 and math.isfinite(t.z_std) and math.isfinite(t.z_mean)):
                raise CsmaqError(f"term {t.id} has an invalid normalizer")

    @property
    def intercept(self):
        return self.terms[0].coefficient

    @property
    def dpws(self):
        seen = {}
        for t in self.terms:
            if t.dpw is not None:
                seen.setdefault(t.dpw.id, t.dpw)
        return list(seen.values())

    def raw_predictors(self, features):
        """Per-frame raw predictors p_k(n), shape (T, K-1)."""
        cols = []
        for t in self.terms[1:]:
            p = eval_bf(self.basis_functions[t.bf], features.dm[:, t.bf])
            if t.dpw is not None:
                p = t.dpw(features.cem) * p
            cols.append(p)
        return np.column_stack(cols) if cols else np.empty((features.n_frames, 0))


def _check_hash(features, model):
    if model.config_hash and features.config_hash and features.config_hash != model.config_hash:
        raise CsmaqError(f"front-end config hash mismatch: features {features.config_hash}, "
                         f"model {model.config_hash}")


def terms_from_z(z, model):
    """Quality-term matrix (T x K) from z-scored predictors (T x K-1)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    coefs = np.array([t.coefficient for t in model.terms[1:]])
    q = np.empty((z.shape[0], len(model.terms)))
    q[:, 0] = model.intercept
    q[:, 1:] = z * coefs
    return q


def zscore_predictors(p, model):
    zm = np.array([t.z_mean for t in model.terms[1:]])
    zs = np.array([t.z_std for t in model.terms[1:]])
    return (p - zm) / zs


def quality_terms(features, model):
    """Per-frame quality terms Q_0..Q_K (T x K+1); column 0 is the intercept."""
    _check_hash(features, model)
    return terms_from_z(zscore_predictors(model.raw_predictors(features), model), model)


def exact_mean(x):
    """Time mean computed as ``x[0] + fsum(x - x[0]) / n``.

    A constant series returns its value exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise CsmaqError("empty series")
    x0 = float(x[0])
    return x0 + math.fsum((x - x0).tolist()) / x.size


@dataclass(frozen=True)
class ScoreResult:
    qm_series: np.ndarray
    terms: np.ndarray
    raw_score: float
    score: float

    @property
    def term_means(self):
        return np.array([exact_mean(c) for c in self.terms.T])


def qm_from_terms(q):
    """Row sums in term order (intercept first)."""
    out = np.array(q[:, 0], copy=True)
    for k in range(1, q.shape[1]):
        out = out + q[:, k]
    return out


def score_terms(q):
    qm = qm_from_terms(q)
    raw = exact_mean(qm)
    return ScoreResult(qm, q, raw, float(np.clip(raw, *SCORE_RANGE)))


def score(features, model):
    """Objective score: clamped time mean of the per-frame quality sum."""
    if features.n_frames == 0:
        raise CsmaqError("empty series")
    return score_terms(quality_terms(features, model))


# --- parameter counting ----------------------------------------------------------

def count_parameters(model):
    """Itemized parameter count of the parts of the model the terms use.

    Basis functions contribute ``1 + 2 * hinges`` each (their clipping range
    is domain metadata, not a fitted parameter), each distinct DPW two per
    factor, every term one coefficient and every non-intercept term two
    normalizer values.
    """
    bfs = sorted({t.bf for t in model.terms if t.bf is not None})
    items = {
        "basis_functions": sum(model.basis_functions[b].n_parameters for b in bfs),
        "dpws": sum(d.n_parameters for d in model.dpws),
        "coefficients": len(model.terms),
        "normalizers": 2 * (len(model.terms) - 1),
    }
    items["total"] = sum(items.values())
    return items


# --- serialization ---------------------------------------------------------------

_NUM = {"type": "number"}
_FACTOR = {
    "type": "object",
    "required": ["cem", "kind", "steepness", "midpoint", "inverted"],
    "additionalProperties": False,
    "properties": {"cem": {"enum": list(CEM_NAMES)}, "kind": {"enum": ["sigmoid", "ramp"]},
                   "steepness": _NUM, "midpoint": _NUM, "inverted": {"type": "boolean"}},
}
MODEL_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "config_hash", "basis_functions", "terms"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": MODEL_FORMAT},
        "version": {"type": "string", "pattern": r"^1\.\d+\.\d+$"},
        "config_hash": {"type": "string"},
        "provenance": {"type": "object"},
        "basis_functions": {
            "type": "array", "minItems": len(DM_NAMES), "maxItems": len(DM_NAMES),
            "items": {
                "type": "object",
                "required": ["dm", "intercept", "knots", "slopes", "x_min", "x_max"],
                "additionalProperties": False,
                "properties": {
                    "dm": {"enum": list(DM_NAMES)}, "intercept": _NUM,
                    "knots": {"type": "array", "items": _NUM, "maxItems": 3},
                    "slopes": {"type": "array", "items": _NUM, "maxItems": 3},
                    "x_min": {"type": ["number", "null"]}, "x_max": {"type": ["number", "null"]},
                },
            },
        },
        "terms": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "coefficient"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"}, "label": {"type": "string"},
                    "coefficient": _NUM,
                    "bf": {"enum": list(DM_NAMES)},
                    "dpw": {
                        "type": "object",
                        "required": ["id", "factors", "inverted"],
                        "additionalProperties": False,
                        "properties": {"id": {"type": "string"}, "inverted": {"type": "boolean"},
                                       "source": {"type": "string"},
                                       "factors": {"type": "array", "minItems": 1, "maxItems": 2,
                                                   "items": _FACTOR}},
                    },
                    "z_mean": _NUM, "z_std": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
    },
}


def _f(x):
    return None if x is None else float(x)


def model_to_dict(model):
    bfs = [{"dm": b.name, "intercept": float(b.intercept), "knots": [float(k) for k in b.knots],
            "slopes": [float(s) for s in b.slopes], "x_min": _f(b.x_min), "x_max": _f(b.x_max)}
           for b in model.basis_functions]
    terms = []
    for t in model.terms:
        d = {"id": t.id, "label": t.label, "coefficient": float(t.coefficient)}
        if not t.is_intercept:
            d["bf"] = DM_NAMES[t.bf]
            if t.dpw is not None:
                d["dpw"] = {"id": t.dpw.id, "source": t.dpw.source, "inverted": bool(t.dpw.inverted),
                            "factors": [{"cem": f.name, "kind": f.kind, "steepness": float(f.steepness),
                                         "midpoint": float(f.midpoint), "inverted": bool(f.inverted)}
                                        for f in t.dpw.factors]}
            d["z_mean"] = float(t.z_mean)
            d["z_std"] = float(t.z_std)
        terms.append(d)
    return {"format": MODEL_FORMAT, "version": model.version, "config_hash": model.config_hash,
            "provenance": model.provenance, "basis_functions": bfs, "terms": terms}


def model_from_dict(d):
    try:
        jsonschema.validate(d, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise CsmaqError(f"invalid model file at '{path}': {exc.message}") from None
    bfs = tuple(BasisFunction(DM_NAMES.index(b["dm"]), b["intercept"], tuple(b["knots"]),
                              tuple(b["slopes"]), b["x_min"], b["x_max"])
                for b in d["basis_functions"])
    terms = []
    for t in d["terms"]:
        dpw = None
        if "dpw" in t:
            dp = t["dpw"]
            dpw = Dpw(dp["id"], tuple(DpwFactor(CEM_NAMES.index(f["cem"]), f["steepness"], f["midpoint"],
                                                f["inverted"], f["kind"]) for f in dp["factors"]),
                      dp["inverted"])
        bf = DM_NAMES.index(t["bf"]) if "bf" in t else None
        if bf is None and dpw is not None:
            raise CsmaqError(f"invalid model file: term {t['id']} has a DPW but no basis function")
        terms.append(QualityTerm(t["id"], t["coefficient"], bf, dpw,
                                 t.get("z_mean", 0.0), t.get("z_std", 1.0)))
    return CsmModel(bfs, tuple(terms), d["config_hash"], d.get("provenance", {}), d["version"])


def dumps_model(model):
    return json.dumps(model_to_dict(model), indent=2, sort_keys=False) + "\n"


def loads_model(text):
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CsmaqError(f"invalid model file: {exc}") from None
    return model_from_dict(d)


def save_model(model, path):
    with open(path, "w") as fh:
        fh.write(dumps_model(model))


def load_model(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"model not found: {path}") from None
    return loads_model(text)


def default_model():
    """The bundled demo model calibrated on the synthetic desk database."""
    from importlib import resources

    return loads_model(resources.files("csmaq.data").joinpath("demo_model.json").read_text())


def reference_model(config_hash=""):
    """Reference seven-term model (intercept 58.3) with identity normalizers.

    Useful for checking the term arithmetic: basis functions are flat at
    zero and the DPWs neutral, so only :func:`terms_from_z` is meaningful.
    """
    flat = tuple(BasisFunction(m, 0.0) for m in range(len(DM_NAMES)))

    def one(i, cem):
        return Dpw(f"DPW{i}", (DpwFactor(cem, 0.0, 0.0),))

    composite = Dpw("DPW9", (DpwFactor(1, 0.0, 0.0), DpwFactor(2, 0.0, 0.0)))
    lin, noise, ehs, rms = (DM_NAMES.index(n) for n in ("LinDist", "NoiseLoudness", "EHS", "RmsModDiff"))
    terms = (
        QualityTerm("Q0", 58.3),
        QualityTerm("Q1", 2.69, lin, one(1, 0)),
        QualityTerm("Q2", 2.61, noise, one(2, 0)),
        QualityTerm("Q3", 1.97, ehs, one(4, 0)),
        QualityTerm("Q4", 1.54, lin, one(5, 1)),
        QualityTerm("Q5", 1.64, ehs, one(6, 1)),
        QualityTerm("Q6", -1.89, noise, composite),
        QualityTerm("Q7", 8.49, rms, None),
    )
    return CsmModel(flat, terms, config_hash, {"source": "reference coefficient table"})
