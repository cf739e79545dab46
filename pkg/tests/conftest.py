import os

import numpy as np
import pytest

from csmaq.audio import SAMPLE_RATE, Waveform, preprocess_pair
from csmaq.synth import ArtifactRecipe, apply_artifact, synth_preset, synth_source

DATA = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(scope="session")
def music():
    return synth_source("music", 2.0, 11)


@pytest.fixture(scope="session")
def speech():
    return synth_source("speech", 2.0, 12)


@pytest.fixture(scope="session")
def identical_pair(music):
    return preprocess_pair(music, music)


@pytest.fixture(scope="session")
def lowpass_pair(music):
    return preprocess_pair(music, apply_artifact(music, ArtifactRecipe("lowpass", 0.6), 1))


@pytest.fixture(scope="session")
def tiny_db(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    db, truth = synth_preset("tiny", str(out), seed=3)
    return str(out), db, truth


def tone(freq=1000.0, seconds=1.0, amp=0.1, sr=SAMPLE_RATE):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)
