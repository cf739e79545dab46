"""Procedural sources, artifacts and a latent quality model.

Used to build desk-scale listening-test databases with known ground truth.

Seeding: the source of signal ``j`` uses ``SeedSequence([seed, j])`` and the
artifact noise of treatment ``i`` uses ``SeedSequence([seed, j, i])``; the
shared treatment design uses ``SeedSequence([seed, DESIGN_STREAM])``. Items
can therefore be generated in any order or in parallel with identical
results.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.ndimage import gaussian_filter1d
from scipy.stats import qmc

from ._validation import CsmaqError
from .audio import SAMPLE_RATE, Waveform, write_waveform
from .database import DatabaseItem, ListeningTestDatabase, save_manifest

SOURCE_KINDS = ("speech", "music", "mixed")
ARTIFACT_KINDS = ("lowpass", "additive-noise", "harmonic-comb-error",
                  "modulation-smearing", "level-offset", "combination")
DESIGN_KINDS = ("lowpass", "additive-noise", "harmonic-comb-error", "modulation-smearing")
SOURCE_RMS = 0.1
DESIGN_STREAM = 7919
DESIGN_CANDIDATES = 2000

# vowel formants (F1, F2, F3) in Hz
VOWELS = np.array([[730, 1090, 2440], [270, 2290, 3010], [530, 1840, 2480],
                   [570, 840, 2410], [300, 870, 2240], [660, 1720, 2410],
                   [440, 1020, 2240], [490, 1350, 1690]], dtype=float)
CHORDS = ((0, 4, 7), (0, 3, 7), (0, 4, 7, 11), (0, 3, 7, 10), (0, 5, 7))


def _rng(*keys):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return signal.lfilter([1.0 - r], a, x)


def _normalize(x, rms=SOURCE_RMS):
    level = np.sqrt(np.mean(x ** 2))
    return x * (rms / level) if level > 0 else x


def _speech(n, sr, rng):
    out = np.zeros(n)
    f0 = rng.uniform(95, 230)
    t = 0.05 + rng.uniform(0, 0.05)
    dur = n / sr
    while t < dur - 0.1:
        length = rng.uniform(0.12, 0.24)
        a, b = int(t * sr), min(n, int((t + length) * sr))
        m = b - a
        # voiced nucleus: jittered pulse train with gentle intonation
        tt = np.arange(m) / sr
        pitch = f0 * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * tt + rng.uniform(0, 6)))
        phase = np.cumsum(pitch / sr)
        pulses = np.diff(np.floor(phase), prepend=0.0)
        src = signal.lfilter([1.0], [1.0, -0.97], pulses)
        v = VOWELS[rng.integers(len(VOWELS))] * rng.uniform(0.9, 1.15)
        for f, bw in zip(v, (80.0, 100.0, 140.0)):
            src = _resonator(src, f, bw, sr)
        env = np.sin(np.pi * np.arange(m) / m) ** 0.7
        out[a:b] += _normalize(src) * env
        # occasional fricative after the syllable
        if rng.random() < 0.6 and b + int(0.07 * sr) < n:
            k = int(rng.uniform(0.04, 0.08) * sr)
            sos = signal.butter(4, [rng.uniform(3000, 4500), rng.uniform(6500, 9000)],
                                "bandpass", fs=sr, output="sos")
            fr = signal.sosfilt(sos, rng.standard_normal(k)) * np.hanning(k)
            out[b:b + k] += 0.6 * _normalize(fr)
            b += k
        gap = rng.uniform(0.04, 0.12) if rng.random() > 0.15 else rng.uniform(0.25, 0.4)
        t = b / sr + gap
    return out


def _wavetable(f0, rolloff, sr, size=4096):
    spec = np.zeros(size // 2 + 1, dtype=complex)
    h = np.arange(1, int(min(20000.0 / f0, size // 2 - 1)) + 1)
    spec[h] = h ** -rolloff
    return np.fft.irfft(spec, n=size)


def _oscillator(table, f0, m, sr, phase0):
    size = len(table)
    pos = (phase0 + np.arange(m) * f0 / sr) * size
    i = np.floor(pos).astype(np.int64)
    frac = pos - i
    return table[i % size] * (1 - frac) + table[(i + 1) % size] * frac


def _music(n, sr, rng):
    out = np.zeros(n)
    rolloff = rng.uniform(0.8, 1.4)
    t = 0.0
    dur = n / sr
    while t < dur:
        length = rng.uniform(0.6, 1.5)
        a, b = int(t * sr), min(n, int((t + length + 0.15) * sr))
        m = b - a
        root = 440.0 * 2 ** ((rng.integers(45, 62) - 69) / 12)
        env = np.minimum(1.0, np.arange(m) / (0.02 * sr)) * np.exp(-np.arange(m) / sr / rng.uniform(0.8, 3))
        rel = int(0.15 * sr)
        if m > rel:
            env[-rel:] *= np.linspace(1, 0, rel)
        for semis in CHORDS[rng.integers(len(CHORDS))]:
            f = root * 2 ** (semis / 12) * (1 + rng.uniform(-0.002, 0.002))
            out[a:b] += _oscillator(_wavetable(f, rolloff, sr), f, m, sr, rng.random()) * env
        t += length
    out = _normalize(out)
    level = rng.uniform(0.0, 1.0)
    if level > 0.2:
        beat = rng.uniform(0.3, 0.5)
        perc = np.zeros(n)
        for start in np.arange(rng.uniform(0, beat), dur - 0.1, beat):
            a = int(start * sr)
            k = min(n - a, int(0.12 * sr))
            decay = np.exp(-np.arange(k) / (rng.uniform(0.02, 0.06) * sr))
            perc[a:a + k] += rng.standard_normal(k) * decay
        out += level * _normalize(perc)
    return out


def synth_source(kind, duration=3.0, seed=0, sample_rate=SAMPLE_RATE):
    """Deterministic procedural source of the given kind, RMS 0.1 (-20 dBFS).

    Returns the waveform; the speech fraction of a ``mixed`` source is
    available through :func:`source_info`.
    """
    return source_info(kind, duration, seed, sample_rate)[0]


def source_info(kind, duration=3.0, seed=0, sample_rate=SAMPLE_RATE):
    if kind not in SOURCE_KINDS:
        raise CsmaqError(f"unknown source kind {kind!r}")
    if not 2.0 <= duration <= 30.0:
        raise CsmaqError("duration must be within [2, 30] s")
    rng = _rng(seed) if np.isscalar(seed) else np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    if kind == "speech":
        x, frac = _speech(n, sample_rate, rng), 1.0
    elif kind == "music":
        x, frac = _music(n, sample_rate, rng), 0.0
    else:
        split = int(n * rng.uniform(0.3, 0.6))
        fade = int(0.05 * sample_rate)
        x = np.zeros(n)
        mus = _music(split + fade, sample_rate, rng)
        mus[-fade:] *= np.linspace(1, 0, fade)
        x[:split + fade] += mus
        x[split:] += _speech(n - split, sample_rate, rng)
        frac = (n - split) / n
    return Waveform(_normalize(x), sample_rate), frac


@dataclass(frozen=True)
class ArtifactRecipe:
    kind: str
    severity: float
    params: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise CsmaqError(f"unknown artifact kind {self.kind!r}")
        if not self.severity >= 0:
            raise CsmaqError("severity must be >= 0")


def snr_for_severity(severity):
    return 40.0 - 35.0 * severity


def lowpass_cutoff(severity):
    return 20000.0 * (1000.0 / 20000.0) ** severity


def _scaled_error(x, err, snr_db):
    target = np.sqrt(np.mean(x ** 2)) * 10 ** (-snr_db / 20)
    return err * (target / np.sqrt(np.mean(err ** 2)))


def _smear(x, sigma, sr):
    nper, hop = 1024, 256
    _, _, z = signal.stft(x, sr, nperseg=nper, noverlap=nper - hop, axis=-1)
    a = np.abs(z)
    mag = gaussian_filter1d(a, sigma, axis=-1, mode="nearest")
    # keep each bin's long-term energy so only the temporal envelope changes
    mag *= np.sqrt(np.sum(a * a, axis=-1, keepdims=True)
                   / np.maximum(np.sum(mag * mag, axis=-1, keepdims=True), 1e-30))
    _, y = signal.istft(mag * np.exp(1j * np.angle(z)), sr, nperseg=nper,
                        noverlap=nper - hop, time_axis=-1, freq_axis=-2)
    return _fit_length(y, x.shape[-1])


def _fit_length(y, n):
    y = y[..., :n]
    if y.shape[-1] < n:
        y = np.concatenate([y, np.zeros(y.shape[:-1] + (n - y.shape[-1],))], axis=-1)
    return y


def _shaped_noise(x, rng, sr):
    """Noise with the short-time spectral envelope of `x` (random STFT phases), as coding noise."""
    nper, hop = 2048, 512
    _, _, z = signal.stft(x, sr, nperseg=nper, noverlap=nper - hop, axis=-1)
    phase = rng.uniform(0.0, 2 * np.pi, z.shape)
    _, y = signal.istft(np.abs(z) * np.exp(1j * phase), sr, nperseg=nper, noverlap=nper - hop,
                        time_axis=-1, freq_axis=-2)
    return _fit_length(y, x.shape[-1])


def apply_artifact(w, recipe, seed=0):
    """Degrade `w` according to `recipe`. Severity 0 returns `w` itself."""
    if recipe.severity == 0:
        return w
    rng = _rng(seed) if np.isscalar(seed) else np.random.default_rng(seed)
    x = w.samples
    sr = w.sample_rate
    s = float(recipe.severity)
    p = recipe.params
    if recipe.kind == "lowpass":
        sos = signal.butter(p.get("order", 8), lowpass_cutoff(s), fs=sr, output="sos")
        y = signal.sosfiltfilt(sos, x, axis=-1)
    elif recipe.kind == "additive-noise":
        y = x + _scaled_error(x, _shaped_noise(x, rng, sr), snr_for_severity(s))
    elif recipe.kind == "harmonic-comb-error":
        # signal-shaped noise through a comb filter (delay 1/f0): error energy sits at
        # multiples of f0 and is uncorrelated with x
        d = int(round(sr / p.get("f0", 300.0)))
        e = _shaped_noise(x, rng, sr)
        e = 0.5 * (e + np.concatenate([np.zeros(x.shape[:-1] + (d,)), e[..., :-d]], axis=-1))
        y = x + _scaled_error(x, e, snr_for_severity(s))
    elif recipe.kind == "modulation-smearing":
        y = _smear(x, p.get("max_sigma", 3.0) * s, sr)
    elif recipe.kind == "level-offset":
        y = x * 10 ** (p.get("db_per_severity", -6.0) * s / 20)
    else:
        parts = p.get("parts", ())
        if not parts:
            raise CsmaqError("combination recipe without parts")
        out = w
        for k, part in enumerate(parts):
            sub = ArtifactRecipe(part.kind, part.severity * s, part.params)
            out = apply_artifact(out, sub, [*np.atleast_1d(seed).tolist(), k])
        return out
    return Waveform(y, sr)


@dataclass(frozen=True)
class LatentQualityModel:
    """Ground-truth quality: 100 * exp(-sum_k w_k * beta_k * severity_k).

    ``w_k`` is 1 except for lowpass, whose weight falls to
    ``1 - speech_lowpass_drop`` for pure speech: linear distortions are
    planted as less salient for speech-like signals.
    """

    beta: tuple = (("lowpass", 1.3), ("additive-noise", 0.4),
                   ("harmonic-comb-error", 0.4), ("modulation-smearing", 0.5),
                   ("level-offset", 0.3))
    speech_lowpass_drop: float = 1.0
    listener_sigma: float = 10.0
    listeners: int = 20

    def weight(self, kind, speech_fraction):
        if kind == "lowpass":
            return 1.0 - self.speech_lowpass_drop * speech_fraction
        return 1.0

    def quality(self, severities, speech_fraction):
        beta = dict(self.beta)
        load = sum(self.weight(k, speech_fraction) * beta[k] * s for k, s in severities.items())
        return float(np.clip(100.0 * np.exp(-load), 0.0, 100.0))

    def observe(self, quality, rng):
        """Mean score of a virtual listener panel."""
        if self.listener_sigma == 0:
            return quality
        noise = rng.normal(0.0, self.listener_sigma / np.sqrt(self.listeners))
        return float(np.clip(quality + noise, 0.0, 100.0))


def recipe_severities(recipe):
    if recipe.kind == "combination":
        out = {}
        for part in recipe.params.get("parts", ()):
            for k, v in recipe_severities(part).items():
                out[k] = out.get(k, 0.0) + v * recipe.severity
        return out
    return {recipe.kind: recipe.severity} if recipe.severity > 0 else {}


@dataclass(frozen=True)
class DatabaseSpec:
    """Counts and design of one synthetic database split.

    ``design="isolated"`` applies each artifact kind alone at each of
    ``severities``; ``design="combination"`` draws ``n_treatments`` joint
    severity vectors per signal from a near-orthogonal Latin hypercube
    (one hypercube shared by all signals when ``shared_design``), jittered
    per signal.
    """

    n_signals: int = 24
    n_treatments: int = 7
    duration: float = 3.0
    split: str = "interaction"
    prefix: str = "s"
    design: str = "combination"
    severities: tuple = (0.33, 0.67, 1.0)
    include_reference: bool = False
    jitter: float = 0.0
    shared_design: bool = True
    source_kinds: tuple = SOURCE_KINDS


def _orthogonal_lhs(n, d, rng, n_candidates=DESIGN_CANDIDATES):
    """Latin hypercube with the smallest largest |correlation| between columns
    among `n_candidates` draws, so artifact severities are nearly unconfounded."""
    sampler = qmc.LatinHypercube(d=d, seed=rng)
    best, best_score = None, np.inf
    for _ in range(n_candidates):
        x = sampler.random(n)
        c = np.corrcoef(x.T) if n > 2 else np.eye(d)
        score = np.max(np.abs(c - np.eye(d)))
        if score < best_score:
            best, best_score = x, score
    return best


def _design(spec, seed, j=0):
    if spec.design == "isolated":
        return [ArtifactRecipe(k, s) for k in DESIGN_KINDS for s in spec.severities]
    if spec.design != "combination":
        raise CsmaqError(f"unknown design {spec.design!r}")
    keys = (seed, DESIGN_STREAM) if spec.shared_design else (seed, DESIGN_STREAM, j)
    lhs = _orthogonal_lhs(spec.n_treatments, len(DESIGN_KINDS), _rng(*keys))
    return [ArtifactRecipe("combination", 1.0,
                           {"parts": tuple(ArtifactRecipe(k, float(v)) for k, v in zip(DESIGN_KINDS, row))})
            for row in lhs]


def _jittered(recipe, rng, amount):
    if recipe.kind != "combination" or amount == 0:
        return recipe
    parts = tuple(ArtifactRecipe(p.kind, float(max(0.0, p.severity + rng.normal(0, amount))), p.params)
                  for p in recipe.params["parts"])
    return ArtifactRecipe("combination", recipe.severity, {"parts": parts})


def _make_signal(args):
    spec, j, seed, latent, out_dir, write = args
    kind = spec.source_kinds[j % len(spec.source_kinds)]
    ref, frac = source_info(kind, spec.duration, np.random.SeedSequence([seed, j]))
    sid = f"{spec.prefix}{j:02d}"
    rows = []
    ref_rel = os.path.join("audio", f"{sid}_ref.wav")
    if write:
        write_waveform(os.path.join(out_dir, ref_rel), ref)
    design = _design(spec, seed, j)
    treatments = [("ref", ArtifactRecipe("lowpass", 0.0))] if spec.include_reference else []
    treatments += [(f"t{i}", r) for i, r in enumerate(design)]
    for i, (tid, recipe) in enumerate(treatments):
        rng = _rng(seed, j, i)
        recipe = _jittered(recipe, rng, spec.jitter)
        sut = apply_artifact(ref, recipe, [seed, j, i, 1])
        sev = recipe_severities(recipe)
        q = latent.quality(sev, frac)
        score = latent.observe(q, rng)
        sut_rel = os.path.join("audio", f"{sid}_{tid}.wav")
        if write:
            write_waveform(os.path.join(out_dir, sut_rel), sut)
        rows.append({"signal_id": sid, "treatment_id": tid, "ref_path": ref_rel,
                     "sut_path": sut_rel, "mean_score": score, "latent_quality": q,
                     "source_kind": kind, "speech_fraction": frac, "split": spec.split,
                     **{f"sev_{k}": sev.get(k, 0.0) for k in ARTIFACT_KINDS[:-1]}})
    return rows


def synth_database(spec, out_dir, seed=0, latent=None, write=True, n_jobs=1):
    """Generate one split. Returns ``(database, ground_truth_rows)``."""
    latent = latent or LatentQualityModel()
    if write:
        os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)
    jobs = [(spec, j, seed, latent, out_dir, write) for j in range(spec.n_signals)]
    if n_jobs == 1:
        results = [_make_signal(a) for a in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_make_signal, jobs))
    truth = [row for rows in results for row in rows]
    items = [DatabaseItem(r["signal_id"], r["treatment_id"], r["ref_path"], r["sut_path"],
                          r["mean_score"], "MUSHRA", r["split"]) for r in truth]
    return ListeningTestDatabase(items, out_dir, spec.split), truth


PRESETS = {
    "desk": (DatabaseSpec(12, 0, split="bf", prefix="b", design="isolated", include_reference=True),
             DatabaseSpec(24, 7, split="interaction", prefix="s")),
    "test": (DatabaseSpec(24, 7, split="test", prefix="t"),),
    "tiny": (DatabaseSpec(6, 0, duration=2.0, split="bf", prefix="b", design="isolated",
                          severities=(0.5, 1.0), include_reference=True),
             DatabaseSpec(6, 4, duration=2.0, split="interaction", prefix="s")),
}


def synth_preset(name, out_dir, seed=0, latent=None, n_jobs=1):
    """Write all splits of a preset to `out_dir` with ``manifest.csv`` and ``ground_truth.csv``."""
    if name not in PRESETS:
        raise CsmaqError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    items, truth = [], []
    for k, spec in enumerate(PRESETS[name]):
        db, rows = synth_database(spec, out_dir, seed + 1000 * k, latent, n_jobs=n_jobs)
        items += db.items
        truth += rows
    db = ListeningTestDatabase(items, out_dir, name)
    save_manifest(db, os.path.join(out_dir, "manifest.csv"))
    save_ground_truth(truth, os.path.join(out_dir, "ground_truth.csv"))
    return db, truth


def save_ground_truth(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
