"""Lightweight speech/music classifier producing one decision every 16 ms.

Three features are computed per decision on a 16 kHz downmix:

* syllabic modulation: energy of the amplitude envelope in the 2-8 Hz
  modulation band relative to its squared mean, over a ~1 s window;
* spectral flux variance over the same window;
* voicing strength: peak of the normalized autocorrelation for lags
  corresponding to 60-400 Hz, over a 40 ms window.

A logistic model maps the (log-scaled) features to a speech probability.
The bundled weights were fitted on synthetic speech-like and music-like
sources (see ``tools/fit_speech_classifier.py``).
"""

import json
from importlib import resources

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

ANALYSIS_RATE = 16000
DECISION_HOP = 256            # 16 ms at 16 kHz
CONTEXT_FRAMES = 63           # ~1 s of decisions
VOICING_WINDOW = 640          # 40 ms
F0_RANGE = (60.0, 400.0)
FEATURE_NAMES = ("syllabic_modulation", "flux_variance", "voicing")
ASSET = "speech_classifier.json"


def decision_period():
    return DECISION_HOP / ANALYSIS_RATE


def _downmix(w):
    x = w.mono()
    g = np.gcd(int(w.sample_rate), ANALYSIS_RATE)
    return signal.resample_poly(x, ANALYSIS_RATE // g, int(w.sample_rate) // g)


def _frames(x, length, hop, n):
    pad = np.concatenate([x, np.zeros(max(0, (n - 1) * hop + length - len(x)))])
    idx = np.arange(length)[np.newaxis, :] + hop * np.arange(n)[:, np.newaxis]
    return pad[idx]


def _context(values, fill=np.nan):
    half = CONTEXT_FRAMES // 2
    padded = np.concatenate([np.full(half, fill), values, np.full(half, fill)])
    return sliding_window_view(padded, CONTEXT_FRAMES)


def speech_features(w):
    """Per-decision feature matrix (n_decisions x 3)."""
    x = _downmix(w)
    n = max(1, int(np.ceil(len(x) / DECISION_HOP)))
    frames = _frames(x, DECISION_HOP, DECISION_HOP, n)

    # syllabic modulation of the amplitude envelope
    env = np.sqrt(np.mean(frames ** 2, axis=1))
    ctx = _context(env, fill=0.0)
    win = np.hanning(CONTEXT_FRAMES)
    spec = np.fft.rfft(ctx * win, n=128, axis=1)
    mod_freqs = np.fft.rfftfreq(128, DECISION_HOP / ANALYSIS_RATE)
    band = (mod_freqs >= 2.0) & (mod_freqs <= 8.0)
    dc = np.abs(spec[:, 0]) ** 2
    centred = np.fft.rfft((ctx - ctx.mean(axis=1, keepdims=True)) * win, n=128, axis=1)
    mod_energy = np.sum(np.abs(centred[:, band]) ** 2, axis=1)
    syllabic = np.where(dc > 0, mod_energy / np.maximum(dc, 1e-30), 0.0)

    # spectral flux variance
    logspec = np.log10(np.abs(np.fft.rfft(frames * np.hanning(DECISION_HOP), axis=1)) ** 2 + 1e-9)
    flux = np.zeros(n)
    flux[1:] = np.mean(np.diff(logspec, axis=0) ** 2, axis=1)
    flux_var = np.nanvar(_context(flux), axis=1)

    # voicing strength
    centre = DECISION_HOP * np.arange(n) + DECISION_HOP // 2 - VOICING_WINDOW // 2
    offset = VOICING_WINDOW
    padded = np.concatenate([np.zeros(offset), x, np.zeros(offset + VOICING_WINDOW)])
    idx = (centre + offset)[:, np.newaxis] + np.arange(VOICING_WINDOW)[np.newaxis, :]
    seg = padded[idx]
    nfft = 2 * VOICING_WINDOW
    ac = np.fft.irfft(np.abs(np.fft.rfft(seg, n=nfft, axis=1)) ** 2, n=nfft, axis=1)
    lag_lo = int(ANALYSIS_RATE / F0_RANGE[1])
    lag_hi = int(ANALYSIS_RATE / F0_RANGE[0])
    lags = np.arange(lag_lo, lag_hi + 1)
    c = np.concatenate([np.zeros((n, 1)), np.cumsum(seg ** 2, axis=1)], axis=1)
    head = c[:, VOICING_WINDOW - lags]             # energy of seg[:N-l]
    tail = c[:, -1:] - c[:, lags]                  # energy of seg[l:]
    denom = np.sqrt(head * tail)
    r = np.where(denom > 1e-20, ac[:, lags] / np.maximum(denom, 1e-20), 0.0)
    voicing = np.clip(r.max(axis=1), 0.0, 1.0)

    return np.column_stack([np.log10(syllabic + 1e-4), np.log10(flux_var + 1e-6), voicing])


class SpeechClassifier(ClassifierMixin, BaseEstimator):
    """Logistic speech/music classifier over :func:`speech_features`.

    Any object with a ``decision_probabilities(waveform)`` method returning
    one probability per 16 ms can be used in its place.
    """

    def __init__(self, C=1.0):
        self.C = C

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        scaler = StandardScaler().fit(X)
        lr = LogisticRegression(C=self.C).fit(scaler.transform(X), y)
        self.classes_ = lr.classes_
        self.mean_ = scaler.mean_
        self.scale_ = scaler.scale_
        self.coef_ = lr.coef_.ravel()
        self.intercept_ = float(lr.intercept_[0])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]

    def decision_probabilities(self, w):
        return self.predict_proba(speech_features(w))[:, 1]

    def to_dict(self):
        check_is_fitted(self, "coef_")
        return {
            "version": 1,
            "features": list(FEATURE_NAMES),
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
            "coef": self.coef_.tolist(),
            "intercept": self.intercept_,
        }

    @classmethod
    def from_dict(cls, d):
        clf = cls()
        clf.classes_ = np.array([0, 1])
        clf.mean_ = np.asarray(d["mean"], dtype=np.float64)
        clf.scale_ = np.asarray(d["scale"], dtype=np.float64)
        clf.coef_ = np.asarray(d["coef"], dtype=np.float64)
        clf.intercept_ = float(d["intercept"])
        return clf


_DEFAULT = None


def default_classifier():
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("csmaq.data").joinpath(ASSET).read_text()
        _DEFAULT = SpeechClassifier.from_dict(json.loads(text))
    return _DEFAULT


def synchronize(decisions, n_frames, period=None, step=0.1):
    """Average per-decision values into `n_frames` frames of `step` seconds.

    Decision ``i`` is assigned to frame ``floor((i + 0.5) * period / step)``,
    i.e. by its centre time. Decisions beyond the last frame are dropped;
    frames without decisions take the value of the nearest one.
    """
    period = period or decision_period()
    d = np.asarray(decisions, dtype=np.float64)
    k = np.floor((np.arange(len(d)) + 0.5) * period / step).astype(int)
    keep = k < n_frames
    sums = np.bincount(k[keep], weights=d[keep], minlength=n_frames)
    counts = np.bincount(k[keep], minlength=n_frames)
    out = np.full(n_frames, np.nan)
    has = counts > 0
    out[has] = sums[has] / counts[has]
    if not has.all():
        centres = (np.arange(len(d)) + 0.5) * period
        for f in np.flatnonzero(~has):
            out[f] = d[np.argmin(np.abs(centres - (f + 0.5) * step))]
    return out
