"""Loading and preprocessing of reference / signal-under-test waveform pairs.

The preprocessing chain is: load (and resample to 48 kHz), delay
compensation, level scaling, silence trimming. All functions are pure;
inputs are never modified in place.

Level convention: an RMS of 1.0 (full scale) corresponds to 100 dB SPL.
"""

import os
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal
from scipy.io import wavfile

from ._validation import CsmaqError, check_signal

SAMPLE_RATE = 48000
FULL_SCALE_SPL = 100.0
DEFAULT_TARGET_SPL = 65.0
DEFAULT_MAX_LAG = 48000
DEFAULT_SILENCE_RUN = 1024
DEFAULT_SILENCE_THRESHOLD = 200.0 / 32768.0

# Kaiser-windowed sinc, beta=10 gives > 90 dB stopband attenuation.
RESAMPLE_WINDOW = ("kaiser", 10.0)


@dataclass(frozen=True)
class Waveform:
    """Audio samples of shape (channels, n) in [-1, 1] with a sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", check_signal(self.samples))
        if self.sample_rate <= 0:
            raise CsmaqError("sample_rate must be positive")

    @property
    def channels(self):
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return len(self) / self.sample_rate

    def mono(self):
        return self.samples.mean(axis=0)


@dataclass(frozen=True)
class AlignedSignalPair:
    ref: Waveform
    sut: Waveform
    applied_lag: int = 0
    gain_ref: float = 1.0
    gain_sut: float = 1.0
    trim_head: int = 0
    trim_tail: int = 0

    def __post_init__(self):
        if len(self.ref) != len(self.sut):
            raise CsmaqError("aligned pair must have equal lengths")
        if self.ref.sample_rate != self.sut.sample_rate:
            raise CsmaqError("aligned pair must have equal sample rates")
        if self.ref.channels != self.sut.channels:
            raise CsmaqError("aligned pair must have equal channel counts")


def resample(samples, sr_in, sr_out=SAMPLE_RATE):
    """Polyphase windowed-sinc resampling. Output length is ceil(n * sr_out / sr_in)."""
    x = np.asarray(samples, dtype=np.float64)
    if sr_in == sr_out:
        return x
    ratio = Fraction(sr_out, sr_in)
    return signal.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1,
                                window=RESAMPLE_WINDOW)


def _pcm_to_float(data):
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # 24-bit files are read left-justified into int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise CsmaqError(f"unsupported sample format {data.dtype}")


def load_waveform(path, target_rate=SAMPLE_RATE):
    """Read a PCM or float WAV file and return it at `target_rate`."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise CsmaqError(f"unreadable file {path}: {exc}") from exc
    if data.size == 0:
        raise CsmaqError(f"{path}: zero-length audio")
    x = _pcm_to_float(data)
    x = x[np.newaxis, :] if x.ndim == 1 else x.T
    if x.shape[0] > 2:
        raise CsmaqError(f"{path}: unsupported channel count {x.shape[0]} (max 2)")
    x = resample(x, rate, target_rate)
    return Waveform(x, target_rate)


def write_waveform(path, w):
    """Write a waveform as a 32-bit float WAV file."""
    data = w.samples.T.astype(np.float32)
    wavfile.write(path, w.sample_rate, data[:, 0] if w.channels == 1 else data)


def _require_rate(*ws):
    for w in ws:
        if w.sample_rate != SAMPLE_RATE:
            raise CsmaqError(f"expected {SAMPLE_RATE} Hz input, got {w.sample_rate}")


def estimate_lag(ref, sut, max_lag):
    """Lag k in [-max_lag, max_lag] maximizing the cross-correlation sum ref[n] * sut[n + k]."""
    r = np.asarray(ref, dtype=np.float64)
    s = np.asarray(sut, dtype=np.float64)
    xc = signal.correlate(s, r, mode="full", method="fft")
    zero = len(r) - 1
    lo = max(zero - max_lag, 0)
    hi = min(zero + max_lag, len(xc) - 1)
    window = xc[lo:hi + 1]
    return int(np.argmax(window)) + lo - zero


def delay_compensate(ref, sut, max_lag=DEFAULT_MAX_LAG):
    """Align `sut` to `ref`.

    Returns the shifted (and truncated) reference and SUT together with the
    estimated lag. A positive lag means the SUT is delayed relative to the
    reference. The lag is estimated on the mono downmix and applied to all
    channels.
    """
    _require_rate(ref, sut)
    if ref.channels != sut.channels:
        raise CsmaqError("reference and SUT channel counts differ")
    if min(len(ref), len(sut)) < 2 * max_lag:
        raise CsmaqError(
            f"signals shorter than 2*max_lag ({min(len(ref), len(sut))} < {2 * max_lag})")
    lag = estimate_lag(ref.mono(), sut.mono(), max_lag)
    r, s = ref.samples, sut.samples
    if lag >= 0:
        s = s[:, lag:]
    else:
        r = r[:, -lag:]
    n = min(r.shape[1], s.shape[1])
    return Waveform(r[:, :n], SAMPLE_RATE), Waveform(s[:, :n], SAMPLE_RATE), lag


def level_spl(w):
    """Long-term level of `w` in dB SPL under the full-scale convention."""
    rms = np.sqrt(np.mean(np.square(w.samples)))
    if rms == 0.0:
        return -np.inf
    return FULL_SCALE_SPL + 20.0 * np.log10(rms)


def scale_levels(pair, target_spl=DEFAULT_TARGET_SPL):
    """Scale both signals by the gain that brings the reference to `target_spl`."""
    level = level_spl(pair.ref)
    if not np.isfinite(level):
        raise CsmaqError("silent reference: cannot scale levels")
    gain = 10.0 ** ((target_spl - level) / 20.0)
    return replace(
        pair,
        ref=Waveform(pair.ref.samples * gain, pair.ref.sample_rate),
        sut=Waveform(pair.sut.samples * gain, pair.sut.sample_rate),
        gain_ref=pair.gain_ref * gain,
        gain_sut=pair.gain_sut * gain,
    )


def _active_windows(x, run, threshold):
    """Boolean per window start: summed |x| over `run` samples reaches `threshold`."""
    a = np.abs(x).sum(axis=0)
    c = np.concatenate(([0.0], np.cumsum(a)))
    if len(a) < run:
        return np.array([c[-1] >= threshold])
    sums = c[run:] - c[:-run]
    return sums >= threshold


def trim_silence(pair, threshold=DEFAULT_SILENCE_THRESHOLD, run=DEFAULT_SILENCE_RUN):
    """Remove leading and trailing regions that are silent in both signals.

    A window of `run` samples is silent when its summed absolute amplitude is
    below `threshold`. The head ends at the first window start that is
    active in either signal; the tail starts after the last active window.
    """
    active = _active_windows(pair.ref.samples, run, threshold) | \
        _active_windows(pair.sut.samples, run, threshold)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        raise CsmaqError("all-silent pair")
    n = len(pair.ref)
    start = int(idx[0])
    stop = min(int(idx[-1]) + run, n)
    return replace(
        pair,
        ref=Waveform(pair.ref.samples[:, start:stop], pair.ref.sample_rate),
        sut=Waveform(pair.sut.samples[:, start:stop], pair.sut.sample_rate),
        trim_head=pair.trim_head + start,
        trim_tail=pair.trim_tail + (n - stop),
    )


@dataclass(frozen=True)
class PipelineConfig:
    target_spl: float = DEFAULT_TARGET_SPL
    max_lag: int = DEFAULT_MAX_LAG
    silence_threshold: float = DEFAULT_SILENCE_THRESHOLD
    silence_run: int = DEFAULT_SILENCE_RUN


def preprocess_pair(ref, sut, config=PipelineConfig()):
    """Run delay compensation, level scaling and silence trimming."""
    if ref.sample_rate != SAMPLE_RATE:
        ref = Waveform(resample(ref.samples, ref.sample_rate), SAMPLE_RATE)
    if sut.sample_rate != SAMPLE_RATE:
        sut = Waveform(resample(sut.samples, sut.sample_rate), SAMPLE_RATE)
    r, s, lag = delay_compensate(ref, sut, config.max_lag)
    pair = AlignedSignalPair(r, s, applied_lag=lag)
    pair = scale_levels(pair, config.target_spl)
    return trim_silence(pair, config.silence_threshold, config.silence_run)


def load_pair(ref_path, sut_path, config=PipelineConfig()):
    return preprocess_pair(load_waveform(ref_path), load_waveform(sut_path), config)
