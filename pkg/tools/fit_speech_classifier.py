"""Fit the bundled speech/music classifier on synthetic training sources.

Training seeds start at 10000 so they never coincide with database or test
fixture seeds. Usage: python3 tools/fit_speech_classifier.py [out.json]
"""

import json
import sys
from pathlib import Path

import numpy as np

from csmaq.audio import SAMPLE_RATE, Waveform
from csmaq.speech import SpeechClassifier, speech_features
from csmaq.synth import synth_source

TRAIN_SEED = 10000
N_PER_KIND = 16


def tone(seed, duration=4.0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration * SAMPLE_RATE)) / SAMPLE_RATE
    f = rng.uniform(100, 4000)
    return Waveform(0.1 * np.sqrt(2) * np.sin(2 * np.pi * f * t), SAMPLE_RATE)


def main(out):
    X, y = [], []
    for k in range(N_PER_KIND):
        for kind, label in (("speech", 1), ("music", 0)):
            f = speech_features(synth_source(kind, 4.0, TRAIN_SEED + k))
            X.append(f)
            y.append(np.full(len(f), label))
        f = speech_features(tone(TRAIN_SEED + k))
        X.append(f)
        y.append(np.zeros(len(f), dtype=int))
    clf = SpeechClassifier(C=1.0).fit(np.vstack(X), np.concatenate(y))
    Path(out).write_text(json.dumps(clf.to_dict(), indent=2) + "\n")
    print(f"wrote {out}; train accuracy {clf.score(np.vstack(X), np.concatenate(y)):.3f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/csmaq/data/speech_classifier.json")
