import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from csmaq._validation import CsmaqError
from csmaq.audio import SAMPLE_RATE, Waveform, preprocess_pair
from csmaq.features import (CEM_NAMES, DM_NAMES, NO_DISTORTION, FeatureExtractor, FeatureSeries,
                            export_features_csv, extract_cem_epn_pdev, extract_dms, extract_features,
                            extract_prob_speech, feature_matrix, load_feature_cache,
                            save_feature_cache, save_internal)
from csmaq.frontend import ExcitationPattern, compute_excitation, compute_modulation
from csmaq.speech import decision_period, synchronize
from csmaq.synth import synth_source

from conftest import tone

DM = {name: i for i, name in enumerate(DM_NAMES)}


def patterns(w):
    e = compute_excitation(w)
    return e, compute_modulation(e)


def pair_features(ref, sut):
    return extract_features(preprocess_pair(ref, sut))


@pytest.mark.parametrize("kind,seed", [("music", 1), ("speech", 2), ("mixed", 3)])
def test_identical_pair_gives_no_distortion(kind, seed):
    w = synth_source(kind, 2.0, seed)
    f = pair_features(w, w)
    np.testing.assert_array_equal(f.dm, np.broadcast_to(NO_DISTORTION, f.dm.shape))
    assert np.all(f.cem[:, CEM_NAMES.index("EPN")] == 0.0)


def test_identical_patterns_give_floors_directly(music):
    e, m = patterns(music)
    dm = extract_dms(e, e, m, m)
    np.testing.assert_array_equal(dm, np.broadcast_to(NO_DISTORTION, dm.shape))


def test_lowpass_3k5_is_linear_distortion_on_music(music):
    sos = signal.butter(8, 3500, fs=SAMPLE_RATE, output="sos")
    sut = Waveform(signal.sosfilt(sos, music.samples, axis=-1), SAMPLE_RATE)
    means = pair_features(music, sut).item_mean_dm
    assert means[DM["LinDist"]] > means[DM["NoiseLoudness"]]


def comb_error(n, rng, f0=300.0):
    d = int(round(SAMPLE_RATE / f0))
    return signal.lfilter([1.0], np.r_[1.0, np.zeros(d - 1), -0.9], rng.standard_normal(n))


@pytest.mark.parametrize("kind", ["music", "speech"])
@pytest.mark.parametrize("snr", [30, 20, 10])
def test_harmonic_comb_error_has_twice_the_ehs_of_white_noise(kind, snr):
    ref = synth_source(kind, 2.0, 11)
    x = ref.samples[0]
    rng = np.random.default_rng(0)
    ehs = []
    for e in (comb_error(len(x), rng), rng.standard_normal(len(x))):
        e = e * np.sqrt(np.mean(x ** 2) / np.mean(e ** 2)) * 10 ** (-snr / 20)
        ehs.append(pair_features(ref, Waveform(x + e, SAMPLE_RATE)).item_mean_dm[DM["EHS"]])
    assert ehs[0] > 2 * ehs[1]


def test_dms_reject_shape_mismatch(music):
    e, m = patterns(music)
    e2, m2 = patterns(Waveform(music.samples[:, :SAMPLE_RATE], SAMPLE_RATE))
    with pytest.raises(CsmaqError):
        extract_dms(e, e2, m, m2)
    with pytest.raises(CsmaqError):
        extract_cem_epn_pdev(e, e2)


def fake_pattern(frames):
    frames = np.asarray(frames, dtype=np.float64)
    return ExcitationPattern(frames, np.arange(frames.shape[1]), 0.02, frames, frames, frames,
                             np.ones(frames.shape[1]))


def test_epn_zero_without_error_and_pdev_zero_for_stationary_reference():
    e = fake_pattern(np.full((60, 8), 2.0))
    epn, pdev = extract_cem_epn_pdev(e, e)
    np.testing.assert_array_equal(epn, 0.0)
    np.testing.assert_array_equal(pdev, 0.0)


def test_pdev_larger_for_modulated_reference():
    t = np.arange(4 * SAMPLE_RATE) / SAMPLE_RATE
    carrier = np.random.default_rng(4).standard_normal(len(t))
    steady = Waveform(0.05 * carrier, SAMPLE_RATE)
    modulated = Waveform(0.05 * carrier * (1 + 0.9 * np.sin(2 * np.pi * 2 * t)), SAMPLE_RATE)
    pdev = []
    for w in (steady, modulated):
        e = compute_excitation(w)
        pdev.append(extract_cem_epn_pdev(e, e)[1].mean())
    assert pdev[1] > pdev[0]


def test_epn_high_for_incoherent_error_low_for_fused_error():
    t = np.arange(120)
    env = 2.0 + np.sin(2 * np.pi * t / 25)
    ref = fake_pattern(np.tile(env[:, None], (1, 8)))
    fused = fake_pattern(np.tile((1.2 * env)[:, None], (1, 8)))
    rng = np.random.default_rng(1)
    incoherent = fake_pattern(ref.frames + rng.uniform(0, 0.5, ref.frames.shape))
    epn_fused = extract_cem_epn_pdev(ref, fused)[0]
    epn_incoherent = extract_cem_epn_pdev(ref, incoherent)[0]
    assert epn_fused[2:-2].max() < 1e-9
    assert epn_incoherent[2:-2].mean() > 0.5


@pytest.mark.parametrize("gain", [0.1, 3.0])
def test_epn_pdev_invariant_to_common_gain(music, gain):
    sut = Waveform(music.samples + 0.01 * np.random.default_rng(2).standard_normal(music.samples.shape),
                   SAMPLE_RATE)
    base = pair_features(music, sut).cem[:, 1:]
    scaled = pair_features(Waveform(gain * music.samples, SAMPLE_RATE),
                           Waveform(gain * sut.samples, SAMPLE_RATE)).cem[:, 1:]
    np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-12)


def speech_surrogate(seconds=3.0, f0=120.0):
    n = int(seconds * SAMPLE_RATE)
    x = np.zeros(n)
    x[::int(SAMPLE_RATE / f0)] = 1.0
    for fc, bw in ((700, 110), (1220, 120), (2600, 160)):
        r = np.exp(-np.pi * bw / SAMPLE_RATE)
        x = signal.lfilter([1 - r], [1, -2 * r * np.cos(2 * np.pi * fc / SAMPLE_RATE), r * r], x)
    t = np.arange(n) / SAMPLE_RATE
    gate = np.clip(np.sin(2 * np.pi * 4 * t), 0, None) ** 0.5
    x *= gate
    return Waveform(0.1 * x / np.sqrt(np.mean(x ** 2)), SAMPLE_RATE)


def test_prob_speech_on_held_out_fixtures():
    assert extract_prob_speech(speech_surrogate()).mean() > 0.5
    assert extract_prob_speech(tone(440.0, 3.0)).mean() < 0.5


@pytest.mark.parametrize("w", [tone(300.0, 1.0), Waveform(np.zeros(SAMPLE_RATE), SAMPLE_RATE)],
                         ids=["tone", "silence"])
def test_prob_speech_range(w):
    p = extract_prob_speech(w)
    assert np.all((p >= 0) & (p <= 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 400), st.integers(1, 30), st.integers(0, 2 ** 16))
def test_synchronize_averages_decisions_by_centre_time(n_dec, n_frames, seed):
    d = np.random.default_rng(seed).uniform(size=n_dec)
    out = synchronize(d, n_frames)
    period = decision_period()
    home = np.floor((np.arange(n_dec) + 0.5) * period / 0.1).astype(int)
    assert out.shape == (n_frames,)
    for f in range(n_frames):
        members = d[home == f]
        if members.size:
            assert out[f] == pytest.approx(math.fsum(members) / members.size, abs=1e-15)
        else:
            assert out[f] in d


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2 ** 16))
def test_item_means_equal_exact_average(n, seed):
    rng = np.random.default_rng(seed)
    f = FeatureSeries(rng.uniform(0, 50, (n, 5)), rng.uniform(0, 1, (n, 3)))
    for j in range(5):
        assert abs(f.item_mean_dm[j] - math.fsum(f.dm[:, j]) / n) <= 1e-12
    for j in range(3):
        assert abs(f.item_mean_cem[j] - math.fsum(f.cem[:, j]) / n) <= 1e-12


def test_feature_series_validation():
    with pytest.raises(CsmaqError, match="same number of frames"):
        FeatureSeries(np.zeros((3, 5)), np.zeros((2, 3)))
    with pytest.raises(CsmaqError, match="empty"):
        FeatureSeries(np.zeros((0, 5)), np.zeros((0, 3)))


def test_series_invariants(lowpass_pair):
    f = extract_features(lowpass_pair)
    assert np.all(f.dm[:, [0, 1, 2, 4]] >= 0)
    assert np.all(f.cem >= 0) and np.all(f.cem[:, 0] <= 1)
    # whole 2048-point frames at a 960-sample hop, grouped five to a 100 ms frame
    assert f.n_frames == (1 + (len(lowpass_pair.ref) - 2048) // 960) // 5


def test_cache_roundtrip(tmp_path, lowpass_pair, identical_pair):
    feats = [extract_features(lowpass_pair), extract_features(identical_pair)]
    path = str(tmp_path / "f.npz")
    save_feature_cache(path, ["a/1", "a/2"], feats, "fp-123")
    keys, back, fp = load_feature_cache(path, with_fingerprint=True)
    assert keys == ["a/1", "a/2"] and fp == "fp-123"
    for a, b in zip(feats, back):
        np.testing.assert_array_equal(a.dm, b.dm)
        np.testing.assert_array_equal(a.cem, b.cem)
        assert a.config_hash == b.config_hash
    np.testing.assert_array_equal(feature_matrix(back), feature_matrix(feats))


def test_csv_export(tmp_path, lowpass_pair):
    f = extract_features(lowpass_pair)
    path = tmp_path / "f.csv"
    export_features_csv(path, ["x"], [f])
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == ["item", "frame", "time", *DM_NAMES, *CEM_NAMES]
    assert len(lines) == 1 + f.n_frames
    row = lines[3].split(",")
    np.testing.assert_array_equal([float(v) for v in row[3:]], np.r_[f.dm[2], f.cem[2]])


@pytest.mark.parametrize("suffix", [".csv", ".npz"])
def test_internal_dump(tmp_path, lowpass_pair, suffix):
    f, internal = extract_features(lowpass_pair, keep_internal=True)
    path = tmp_path / f"internal{suffix}"
    save_internal(str(path), internal)
    n = internal.ref[0].n_frames
    if suffix == ".csv":
        assert len(path.read_text().splitlines()) == 1 + 2 * n
    else:
        with np.load(path) as z:
            np.testing.assert_array_equal(z["ref_0"], internal.ref[0].frames)
            np.testing.assert_array_equal(z["sut_0"], internal.sut[0].frames)


def test_feature_extractor_accepts_waveform_tuples(music):
    out = FeatureExtractor().fit().transform([(music, music)])
    np.testing.assert_array_equal(out[0].dm, np.broadcast_to(NO_DISTORTION, out[0].dm.shape))
