"""Distortion metrics (DMs) and cognitive effect metrics (CEMs).

All metrics are first computed on the 20 ms grid of the front end and then
averaged over consecutive groups of frames to the 100 ms system grid.
SegNMR is reported in dB and floored at -60 dB; the remaining DMs are
non-negative.

CEM operationalizations used here:

* ``PDEV`` (informational masking): coefficient of variation of the summed
  reference excitation over a sliding 500 ms window.
* ``EPN`` (perceptual streaming): ``1 - |corr|`` between the summed error
  excitation and the summed reference excitation over the same window.
  Zero when there is no error; one when the error is present but either
  envelope is flat.
* ``probSpeech``: speech probability of the reference from a pluggable
  classifier, decisions every 16 ms averaged into 100 ms frames.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import uniform_filter1d
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import CsmaqError, check_same_shape
from .audio import AlignedSignalPair, PipelineConfig, preprocess_pair
from .frontend import (FrontEndConfig, compute_excitation, compute_modulation, config_hash,
                       exp_smooth, filterbank, masking_offset_db)
from .speech import default_classifier, synchronize

DM_NAMES = ("RmsModDiff", "NoiseLoudness", "LinDist", "SegNMR", "EHS")
CEM_NAMES = ("probSpeech", "EPN", "PDEV")
SYSTEM_HOP = 0.1
SEGNMR_FLOOR_DB = -60.0
MISSING_WEIGHT = 0.25
ADAPT_TAU = 0.2
LIN_BAND_SMOOTH = 5
CEM_WINDOW = 0.5
EHS_ENERGY_GATE = 100.0
EHS_EPS = 1e-2
EHS_DETREND = 33
# value of each DM for an identical pair
NO_DISTORTION = np.array([0.0, 0.0, 0.0, SEGNMR_FLOOR_DB, 0.0])


@dataclass
class FeatureSeries:
    dm: np.ndarray
    cem: np.ndarray
    hop: float = SYSTEM_HOP
    config_hash: str = ""

    def __post_init__(self):
        self.dm = np.asarray(self.dm, dtype=np.float64).reshape(-1, len(DM_NAMES))
        self.cem = np.asarray(self.cem, dtype=np.float64).reshape(-1, len(CEM_NAMES))
        if self.dm.shape[0] != self.cem.shape[0]:
            raise CsmaqError("DM and CEM series must have the same number of frames")
        if self.dm.shape[0] == 0:
            raise CsmaqError("empty feature series")

    @property
    def n_frames(self):
        return self.dm.shape[0]

    @property
    def item_mean_dm(self):
        return self.dm.mean(axis=0)

    @property
    def item_mean_cem(self):
        return self.cem.mean(axis=0)

    def item_means(self):
        return np.concatenate([self.item_mean_dm, self.item_mean_cem])


def frames_per_step(cfg):
    return max(1, int(round(SYSTEM_HOP / cfg.hop_seconds)))


def to_system_grid(x, cfg):
    """Average 20 ms rows of `x` into 100 ms rows (trailing partial group dropped)."""
    k = frames_per_step(cfg)
    x = np.asarray(x, dtype=np.float64)
    n = max(1, x.shape[0] // k)
    if x.shape[0] < k:
        return x.mean(axis=0, keepdims=True)
    return x[:n * k].reshape(n, k, *x.shape[1:]).mean(axis=1)


def _partial_loudness(signal_energy, masker_energy, noise_floor, alpha):
    return ((noise_floor + signal_energy + masker_energy) ** alpha
            - (noise_floor + masker_energy) ** alpha)


def _masking_factor(e_ref):
    return 10.0 ** (-masking_offset_db(e_ref.band_centers) / 10.0)


def linear_reference(e_ref, e_sut, cfg):
    """Reference energy passed through the estimated linear transfer function.

    Two per-band gain estimates are formed from 200 ms-smoothed spectra: the
    cross-spectral ``|S_sr|^2 / S_rr^2`` (H1, blind to uncorrelated additive
    noise but lowered by incoherent changes such as temporal smearing) and
    the energy ratio ``S_ss / S_rr`` (raised by additive noise). A linear
    filter moves both the same way, so the gain kept is the one closer to
    unity when they agree in direction and unity otherwise. The log gain is
    then smoothed over neighbouring bands. The internal noise floor
    regularizes bands without reference energy.
    """
    fb = filterbank(cfg)
    decay = np.exp(-cfg.hop_seconds / ADAPT_TAU)
    taps = int(np.ceil(cfg.smear_decays * ADAPT_TAU / cfg.hop_seconds))
    cross = (e_sut.spectrum * np.conj(e_ref.spectrum)) @ fb.response.T
    c = np.hypot(exp_smooth(cross.real, decay, taps), exp_smooth(cross.imag, decay, taps))
    p_rr = exp_smooth(e_ref.band_power, decay, taps) + fb.noise_floor
    p_ss = exp_smooth(e_sut.band_power, decay, taps) + fb.noise_floor
    l_h1 = 2.0 * np.log((c + fb.noise_floor) / p_rr)
    l_en = np.log(p_ss / p_rr)
    log_gain = np.where(np.sign(l_h1) == np.sign(l_en),
                        np.sign(l_h1) * np.minimum(np.abs(l_h1), np.abs(l_en)), 0.0)
    if LIN_BAND_SMOOTH > 1:
        log_gain = uniform_filter1d(log_gain, LIN_BAND_SMOOTH, axis=1, mode="nearest")
    return e_ref.energy * np.exp(log_gain)


def noise_loudness(e_ref, e_sut, cfg, e_lin=None):
    """Partial loudness of additive and missing components relative to the
    linearly adapted reference."""
    fb = filterbank(cfg)
    beta = _masking_factor(e_ref)
    e_lin = linear_reference(e_ref, e_sut, cfg) if e_lin is None else e_lin
    added = np.maximum(e_sut.energy - e_lin, 0.0)
    missing = np.maximum(e_lin - e_sut.energy, 0.0)
    pl_added = _partial_loudness(added, beta * e_lin, fb.noise_floor, cfg.alpha)
    pl_missing = _partial_loudness(missing, beta * e_sut.energy, fb.noise_floor, cfg.alpha)
    return pl_added.mean(axis=1) + MISSING_WEIGHT * pl_missing.mean(axis=1)


def linear_distortion(e_ref, e_sut, cfg, e_lin=None):
    """Loudness of the difference between the reference and its linearly
    adapted version (spectral-envelope and bandwidth errors)."""
    fb = filterbank(cfg)
    beta = _masking_factor(e_ref)
    e_lin = linear_reference(e_ref, e_sut, cfg) if e_lin is None else e_lin
    added = np.maximum(e_lin - e_ref.energy, 0.0)
    missing = np.maximum(e_ref.energy - e_lin, 0.0)
    pl = (_partial_loudness(added, beta * e_ref.energy, fb.noise_floor, cfg.alpha)
          + _partial_loudness(missing, beta * e_lin, fb.noise_floor, cfg.alpha))
    return pl.mean(axis=1)


def seg_nmr(e_ref, e_sut, cfg):
    fb = filterbank(cfg)
    noise = (np.abs(e_sut.spectrum - e_ref.spectrum) ** 2) @ fb.response.T
    mask = e_ref.energy * _masking_factor(e_ref) + fb.noise_floor
    ratio = np.maximum(noise / mask, 10.0 ** (SEGNMR_FLOOR_DB / 10.0))
    return 10.0 * np.log10(ratio).mean(axis=1)


def error_harmonic_structure(e_ref, e_sut, cfg):
    """Harmonic structure of the log error spectrum, weighted by error energy."""
    bins = slice(1, 1 + cfg.ehs_bins)
    p_ref = np.abs(e_ref.spectrum[:, bins]) ** 2
    p_sut = np.abs(e_sut.spectrum[:, bins]) ** 2
    p_err = np.abs(e_sut.spectrum[:, bins] - e_ref.spectrum[:, bins]) ** 2
    err = p_err.sum(axis=1)
    ref_energy = p_ref.sum(axis=1)
    out = np.zeros(p_ref.shape[0])
    active = (err > 0) & (np.maximum(ref_energy, p_sut.sum(axis=1)) >= EHS_ENERGY_GATE)
    if not active.any():
        return out
    d = np.log10(p_err[active] + EHS_EPS)
    # remove the spectral-envelope trend so that only ripple structure remains
    d = d - uniform_filter1d(d, EHS_DETREND, axis=1, mode="nearest")
    half = cfg.ehs_bins // 2
    corr = np.zeros((d.shape[0], half))
    a = d[:, :half]
    ea = np.sum(a * a, axis=1)
    for lag in range(half):
        b = d[:, lag:lag + half]
        den = np.sqrt(ea * np.sum(b * b, axis=1))
        corr[:, lag] = np.where(den > 0, np.sum(a * b, axis=1) / np.where(den > 0, den, 1.0), 0.0)
    peaks = np.zeros(d.shape[0])
    for i, c in enumerate(corr):
        # peak after the first valley of the autocorrelation
        rising = np.flatnonzero(np.diff(c) > 0)
        if rising.size:
            peaks[i] = max(0.0, c[rising[0]:].max())
    weight = np.sqrt(err[active] / (err[active] + ref_energy[active]))
    out[active] = peaks * weight
    return out


def rms_mod_diff(m_ref, m_sut):
    diff = np.abs(m_sut.frames - m_ref.frames) / (1.0 + m_ref.frames)
    return np.sqrt(np.mean(diff ** 2, axis=1))


def frame_dms(e_ref, e_sut, m_ref, m_sut, cfg=None):
    """DM values on the front-end grid, shape (T, 5)."""
    cfg = cfg or FrontEndConfig()
    check_same_shape(e_ref.frames, e_sut.frames, "excitation patterns")
    check_same_shape(m_ref.frames, m_sut.frames, "modulation patterns")
    check_same_shape(e_ref.frames, m_ref.frames, "excitation and modulation patterns")
    e_lin = linear_reference(e_ref, e_sut, cfg)
    return np.column_stack([
        rms_mod_diff(m_ref, m_sut),
        noise_loudness(e_ref, e_sut, cfg, e_lin),
        linear_distortion(e_ref, e_sut, cfg, e_lin),
        seg_nmr(e_ref, e_sut, cfg),
        error_harmonic_structure(e_ref, e_sut, cfg),
    ])


def extract_dms(e_ref, e_sut, m_ref, m_sut, cfg=None):
    """DM series on the 100 ms grid, shape (T100, 5)."""
    cfg = cfg or FrontEndConfig()
    return to_system_grid(frame_dms(e_ref, e_sut, m_ref, m_sut, cfg), cfg)


def _windows(x, cfg):
    n = max(1, int(round(CEM_WINDOW / cfg.hop_seconds)))
    half = n // 2
    padded = np.concatenate([np.full(half, np.nan), x, np.full(n - 1 - half, np.nan)])
    return sliding_window_view(padded, n)


def frame_cem_epn_pdev(e_ref, e_sut, cfg=None):
    cfg = cfg or FrontEndConfig()
    check_same_shape(e_ref.frames, e_sut.frames, "excitation patterns")
    ref_env = e_ref.frames.sum(axis=1)
    err_env = np.abs(e_sut.frames - e_ref.frames).sum(axis=1)

    rw = _windows(ref_env, cfg)
    ew = _windows(err_env, cfg)
    with np.errstate(invalid="ignore"):
        r_flat = np.nanmax(rw, axis=1) == np.nanmin(rw, axis=1)
        e_flat = np.nanmax(ew, axis=1) == np.nanmin(ew, axis=1)
        pdev = np.where(r_flat, 0.0, np.nanstd(rw, axis=1) / np.nanmean(rw, axis=1))

        rc = rw - np.nanmean(rw, axis=1, keepdims=True)
        ec = ew - np.nanmean(ew, axis=1, keepdims=True)
        cov = np.nansum(rc * ec, axis=1)
        den = np.sqrt(np.nansum(rc ** 2, axis=1) * np.nansum(ec ** 2, axis=1))
        corr = np.where(den > 0, cov / np.where(den > 0, den, 1.0), 0.0)
    no_error = np.nanmax(ew, axis=1) == 0.0
    epn = np.where(no_error, 0.0, np.where(r_flat | e_flat, 1.0, 1.0 - np.abs(corr)))
    return np.clip(epn, 0.0, 1.0), pdev


def extract_cem_epn_pdev(e_ref, e_sut, cfg=None):
    """EPN and PDEV series on the 100 ms grid."""
    cfg = cfg or FrontEndConfig()
    epn, pdev = frame_cem_epn_pdev(e_ref, e_sut, cfg)
    return to_system_grid(epn, cfg), to_system_grid(pdev, cfg)


def extract_prob_speech(w, n_frames=None, classifier=None):
    """Speech probability of `w` on the 100 ms grid."""
    classifier = classifier or default_classifier()
    decisions = np.clip(np.asarray(classifier.decision_probabilities(w), dtype=np.float64), 0, 1)
    if n_frames is None:
        n_frames = max(1, int(len(w) / w.sample_rate / SYSTEM_HOP))
    return synchronize(decisions, n_frames)


@dataclass
class InternalPatterns:
    """Front-end outputs kept for debugging dumps."""

    ref: list
    sut: list


def extract_features(pair, cfg=None, classifier=None, keep_internal=False):
    """FeatureSeries for a preprocessed pair. Channel DMs/CEMs are averaged."""
    cfg = cfg or FrontEndConfig()
    dms, epns, pdevs, refs, suts = [], [], [], [], []
    for c in range(pair.ref.channels):
        e_r = compute_excitation(pair.ref, cfg, c)
        e_s = compute_excitation(pair.sut, cfg, c)
        m_r = compute_modulation(e_r, cfg) if e_r.n_frames >= 2 else None
        m_s = compute_modulation(e_s, cfg) if e_s.n_frames >= 2 else None
        if m_r is None:
            raise CsmaqError("signal too short for feature extraction")
        dms.append(extract_dms(e_r, e_s, m_r, m_s, cfg))
        epn, pdev = extract_cem_epn_pdev(e_r, e_s, cfg)
        epns.append(epn)
        pdevs.append(pdev)
        if keep_internal:
            refs.append(e_r)
            suts.append(e_s)
    dm = np.mean(dms, axis=0)
    n = dm.shape[0]
    prob = extract_prob_speech(pair.ref, n, classifier)
    cem = np.column_stack([prob, np.mean(epns, axis=0), np.mean(pdevs, axis=0)])
    fs = FeatureSeries(dm, cem, SYSTEM_HOP, config_hash(cfg))
    if keep_internal:
        return fs, InternalPatterns(refs, suts)
    return fs


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Turn (reference, SUT) waveform pairs into :class:`FeatureSeries`.

    ``X`` is a sequence whose elements are either already aligned
    :class:`AlignedSignalPair` objects or ``(ref, sut)`` tuples of
    :class:`Waveform` (which are preprocessed first).
    """

    def __init__(self, frontend=None, pipeline=None, classifier=None, n_jobs=1):
        self.frontend = frontend
        self.pipeline = pipeline
        self.classifier = classifier
        self.n_jobs = n_jobs

    def fit(self, X=None, y=None):
        return self

    def _one(self, item):
        if not isinstance(item, AlignedSignalPair):
            ref, sut = item
            item = preprocess_pair(ref, sut, self.pipeline or PipelineConfig())
        return extract_features(item, self.frontend, self.classifier)

    def transform(self, X):
        items = list(X)
        if self.n_jobs == 1 or len(items) < 2:
            return [self._one(it) for it in items]
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=self.n_jobs) as pool:
            return list(pool.map(self._one, items))


def feature_matrix(features):
    """Item-mean matrix (n_items x 8): five DMs followed by three CEMs."""
    return np.vstack([f.item_means() for f in features])


# --- feature cache -------------------------------------------------------------

def save_feature_cache(path, keys, features, fingerprint=""):
    """Store feature series as a columnar ``.npz`` archive.

    Arrays: ``keys`` (item keys), ``offsets`` (frame offsets, length n+1),
    ``dm`` and ``cem`` (concatenated frames), ``item_mean_dm``,
    ``item_mean_cem``, ``config_hash`` and ``fingerprint`` (an opaque
    string identifying the inputs the features were computed from).
    """
    lengths = [f.n_frames for f in features]
    np.savez(
        path,
        keys=np.array([str(k) for k in keys]),
        offsets=np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64),
        dm=np.vstack([f.dm for f in features]),
        cem=np.vstack([f.cem for f in features]),
        item_mean_dm=np.vstack([f.item_mean_dm for f in features]),
        item_mean_cem=np.vstack([f.item_mean_cem for f in features]),
        config_hash=np.array([f.config_hash for f in features]),
        fingerprint=np.array(str(fingerprint)),
    )


def load_feature_cache(path, with_fingerprint=False):
    with np.load(path, allow_pickle=False) as z:
        off = z["offsets"]
        feats = [FeatureSeries(z["dm"][a:b], z["cem"][a:b], SYSTEM_HOP, str(h))
                 for a, b, h in zip(off[:-1], off[1:], z["config_hash"])]
        keys = [str(k) for k in z["keys"]]
        if with_fingerprint:
            return keys, feats, str(z["fingerprint"]) if "fingerprint" in z.files else ""
        return keys, feats


def export_features_csv(path, keys, features):
    header = ["item", "frame", "time"] + list(DM_NAMES) + list(CEM_NAMES)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for key, f in zip(keys, features):
            for n in range(f.n_frames):
                vals = [repr(float(v)) for v in np.concatenate([f.dm[n], f.cem[n]])]
                fh.write(",".join([str(key), str(n), repr(round(n * f.hop, 6))] + vals) + "\n")


def save_internal(path, internal):
    """Write front-end excitation patterns for debugging.

    ``.csv``: one row per frame with columns ``signal, channel, frame,
    time`` followed by one column per band (compressed excitation).
    Anything else: ``.npz`` with ``band_centers``, ``frame_hop`` and one
    (frames x bands) array per signal and channel named ``ref_<c>`` and
    ``sut_<c>``.
    """
    pats = [("ref", c, e) for c, e in enumerate(internal.ref)] + \
           [("sut", c, e) for c, e in enumerate(internal.sut)]
    centers = internal.ref[0].band_centers
    if str(path).lower().endswith(".csv"):
        with open(path, "w") as fh:
            fh.write(",".join(["signal", "channel", "frame", "time"]
                              + [f"band_{b}" for b in range(len(centers))]) + "\n")
            for name, c, e in pats:
                for n, row in enumerate(e.frames):
                    fh.write(",".join([name, str(c), str(n), repr(round(n * e.frame_hop, 6))]
                                      + [repr(float(v)) for v in row]) + "\n")
        return
    np.savez(path, band_centers=centers, frame_hop=np.array(internal.ref[0].frame_hop),
             **{f"{name}_{c}": e.frames for name, c, e in pats})
