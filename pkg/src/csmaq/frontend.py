"""Perceptual front end: waveforms to excitation and modulation patterns.

The chain follows the structure of the PEAQ advanced model without aiming
for bit-exact conformance:

1. Hann-windowed FFT frames (2048 points, 20 ms hop), scaled so that an
   RMS of 1.0 corresponds to 100 dB SPL.
2. Outer/middle-ear weighting (Terhardt-style frequency response).
3. Band energies through a bank of 4th-order gammatone magnitude responses
   centred on an equally spaced critical-band-rate grid.
4. Level-dependent spreading across bands (fixed lower slope, upper slope
   getting shallower with level).
5. Forward masking: a truncated exponential smear per band, combined with
   the unsmeared energy by a maximum.
6. Internal-noise floor addition and power-law loudness compression.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import CsmaqError

FEATURE_VERSION = "1"


@dataclass(frozen=True)
class FrontEndConfig:
    sample_rate: int = 48000
    n_fft: int = 2048
    hop: int = 960
    n_bands: int = 40
    f_min: float = 80.0
    f_max: float = 18000.0
    alpha: float = 0.23
    lower_slope_db: float = 27.0
    tau_1k: float = 0.050
    tau_min: float = 0.008
    smear_decays: float = 5.0
    modulation_tau: float = 0.050
    ehs_bins: int = 256

    @property
    def hop_seconds(self):
        return self.hop / self.sample_rate

    def to_dict(self):
        return asdict(self)


def config_hash(cfg):
    """Stable hash of the front-end configuration and feature definitions."""
    payload = json.dumps({"config": cfg.to_dict(), "features": FEATURE_VERSION},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def hz_to_bark(f):
    return 7.0 * np.arcsinh(np.asarray(f, dtype=np.float64) / 650.0)


def bark_to_hz(z):
    return 650.0 * np.sinh(np.asarray(z, dtype=np.float64) / 7.0)


def band_centers(cfg):
    """Centre frequencies (Hz) and critical-band rates (Bark) of the filterbank."""
    z = np.linspace(hz_to_bark(cfg.f_min), hz_to_bark(cfg.f_max), cfg.n_bands)
    return bark_to_hz(z), z


def erb(f):
    return 24.7 * (4.37 * np.asarray(f) / 1000.0 + 1.0)


def gammatone_power_response(f, fc):
    """Squared magnitude of a 4th-order gammatone filter centred on `fc`."""
    b = 1.019 * erb(fc)
    return (1.0 + ((np.asarray(f) - fc) / b) ** 2) ** -4


def ear_weighting_db(f):
    """Outer and middle ear transfer function in dB."""
    k = np.maximum(np.asarray(f, dtype=np.float64), 1.0) / 1000.0
    return (-0.6 * 3.64 * k ** -0.8 + 6.5 * np.exp(-0.6 * (k - 3.3) ** 2)
            - 1e-3 * k ** 3.6)


def internal_noise(f):
    """Internal-noise energy per band (SPL power units, 0 dB SPL == 1)."""
    return 10.0 ** (0.4 * 0.364 * (np.asarray(f) / 1000.0) ** -0.8)


def masking_offset_db(z):
    return np.maximum(3.0, 0.25 * np.asarray(z))


@dataclass
class FilterBank:
    freqs: np.ndarray        # FFT bin frequencies
    centers_hz: np.ndarray
    centers_bark: np.ndarray
    response: np.ndarray     # (bands, bins) power response
    ear_gain: np.ndarray     # per-bin power gain
    noise_floor: np.ndarray  # per-band internal noise
    tau: np.ndarray          # per-band forward-masking time constant


_FILTERBANKS = {}


def filterbank(cfg):
    fb = _FILTERBANKS.get(cfg)
    if fb is None:
        freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
        fc, zc = band_centers(cfg)
        response = gammatone_power_response(freqs[np.newaxis, :], fc[:, np.newaxis])
        ear = 10.0 ** (ear_weighting_db(freqs) / 10.0)
        ear[0] = 0.0
        tau = cfg.tau_min + (cfg.tau_1k - cfg.tau_min) * np.sqrt(1000.0 / fc)
        fb = FilterBank(freqs, fc, zc, response, ear, internal_noise(fc), tau)
        _FILTERBANKS[cfg] = fb
    return fb


@dataclass
class ExcitationPattern:
    """Time-pitch-loudness representation of one channel.

    ``frames`` holds the compressed excitation (T x B). The remaining arrays
    are intermediate products needed by the distortion metrics: ``energy``
    is the spread and smeared excitation energy before the noise floor,
    ``band_power`` the ear-weighted band energy before spreading, and
    ``spectrum`` the ear-weighted complex spectrum (T x bins).
    """

    frames: np.ndarray
    band_centers: np.ndarray
    frame_hop: float
    energy: np.ndarray = field(repr=False)
    band_power: np.ndarray = field(repr=False)
    spectrum: np.ndarray = field(repr=False)
    floor: np.ndarray = field(repr=False)

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass
class ModulationPattern:
    frames: np.ndarray


def frame_signal(x, cfg):
    """Split a 1-D signal into frames starting at multiples of the hop."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < cfg.n_fft:
        x = np.concatenate([x, np.zeros(cfg.n_fft - len(x))])
    n_frames = 1 + (len(x) - cfg.n_fft) // cfg.hop
    idx = np.arange(cfg.n_fft)[np.newaxis, :] + cfg.hop * np.arange(n_frames)[:, np.newaxis]
    return x[idx]


def _spectrum(x, cfg, fb):
    frames = frame_signal(x, cfg)
    win = np.hanning(cfg.n_fft)
    spec = np.fft.rfft(frames * win, axis=1)
    # one-sided power scaling: sum over bins equals the mean power of the frame
    scale = 2.0 / (cfg.n_fft * np.sum(win ** 2)) * 10.0 ** (100.0 / 10.0)
    return spec * np.sqrt(scale * fb.ear_gain)


def _spread(energy, fb, cfg):
    """Level-dependent spreading of band energies, (T, B) -> (T, B)."""
    z = fb.centers_bark
    dz = z[np.newaxis, :] - z[:, np.newaxis]       # [i, j] = z_j - z_i
    with np.errstate(divide="ignore"):
        level = 10.0 * np.log10(energy)
    upper = np.clip(24.0 + 230.0 / fb.centers_hz[np.newaxis, :] - 0.2 * level, 5.0, 40.0)
    up = np.maximum(dz, 0.0)[np.newaxis, :, :] * upper[:, :, np.newaxis]
    down = np.maximum(-dz, 0.0)[np.newaxis, :, :] * cfg.lower_slope_db
    weights = 10.0 ** (-(up + down) / 10.0)
    return np.einsum("ti,tij->tj", energy, weights)


def exp_smooth(x, decay, taps):
    """Truncated first-order low-pass along axis 0 with per-column decay.

    Implemented as an explicit FIR so that outputs depend only on the last
    `taps` + 1 inputs, which keeps interior frames of time-shifted inputs
    bit-identical.
    """
    decay = np.broadcast_to(np.asarray(decay, dtype=np.float64), x.shape[1:])
    out = np.zeros_like(x)
    n = x.shape[0]
    for m in range(min(taps, n - 1) + 1):
        w = (1.0 - decay) * decay ** m
        out[m:] += w * x[:n - m]
    return out


def smear_taps(cfg, tau):
    return int(np.ceil(cfg.smear_decays * np.max(tau) / cfg.hop_seconds))


def compute_excitation(w, cfg=None, channel=0):
    """Excitation pattern of one channel of a 48 kHz waveform."""
    cfg = cfg or FrontEndConfig()
    if w.sample_rate != cfg.sample_rate:
        raise CsmaqError(f"front end expects {cfg.sample_rate} Hz input")
    fb = filterbank(cfg)
    spec = _spectrum(w.samples[channel], cfg, fb)
    power = np.abs(spec) ** 2
    band_power = power @ fb.response.T
    spread = _spread(band_power, fb, cfg)
    decay = np.exp(-cfg.hop_seconds / fb.tau)
    smeared = np.maximum(exp_smooth(spread, decay, smear_taps(cfg, fb.tau)), spread)
    floor = fb.noise_floor ** cfg.alpha
    frames = (smeared + fb.noise_floor) ** cfg.alpha
    return ExcitationPattern(frames=frames, band_centers=fb.centers_bark,
                             frame_hop=cfg.hop_seconds, energy=smeared,
                             band_power=band_power, spectrum=spec, floor=floor)


def excitation_patterns(w, cfg=None):
    return [compute_excitation(w, cfg, c) for c in range(w.channels)]


def compute_modulation(e, cfg=None):
    """Normalized envelope-derivative modulation measure per band."""
    cfg = cfg or FrontEndConfig()
    env = e.frames
    if env.shape[0] < 2:
        raise CsmaqError("modulation needs at least 2 frames")
    deriv = np.zeros_like(env)
    deriv[1:] = np.abs(np.diff(env, axis=0)) / e.frame_hop
    decay = np.exp(-e.frame_hop / cfg.modulation_tau)
    taps = int(np.ceil(cfg.smear_decays * cfg.modulation_tau / e.frame_hop))
    d = exp_smooth(deriv, decay, taps)
    level = exp_smooth(env, decay, taps)
    # the smoothed level ramps up from zero over the first frames
    level = np.maximum(level, e.floor)
    return ModulationPattern(d / level)
