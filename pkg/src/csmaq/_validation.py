"""Input validation helpers shared by the estimators and pipeline functions."""

import numpy as np


class CsmaqError(Exception):
    """Domain error raised for invalid audio, features, models or databases."""


def check_signal(samples, name="signal"):
    """Return `samples` as a 2-D float64 array of shape (channels, n)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[np.newaxis, :]
    if x.ndim != 2:
        raise CsmaqError(f"{name}: expected 1-D or 2-D samples, got shape {x.shape}")
    if x.shape[0] > x.shape[1] and x.shape[1] <= 2:
        # (n, channels) layout as returned by wav readers
        x = x.T
    if x.shape[0] not in (1, 2):
        raise CsmaqError(f"{name}: unsupported channel count {x.shape[0]} (max 2)")
    if x.shape[1] == 0:
        raise CsmaqError(f"{name}: zero-length audio")
    if not np.all(np.isfinite(x)):
        raise CsmaqError(f"{name}: non-finite samples")
    return np.ascontiguousarray(x)


def check_vector(x, name="x", min_len=1, finite=True):
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size < min_len:
        raise CsmaqError(f"{name}: need at least {min_len} values, got {v.size}")
    if finite and not np.all(np.isfinite(v)):
        raise CsmaqError(f"{name}: non-finite values")
    return v


def check_same_length(*arrays, names=None):
    lengths = {len(a) for a in arrays}
    if len(lengths) != 1:
        names = names or [f"arg{i}" for i in range(len(arrays))]
        raise CsmaqError(f"length mismatch between {', '.join(names)}")


def check_same_shape(a, b, what="patterns"):
    if np.shape(a) != np.shape(b):
        raise CsmaqError(f"shape mismatch between {what}: {np.shape(a)} vs {np.shape(b)}")
