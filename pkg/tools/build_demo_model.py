"""Calibrate the bundled demo model and refresh the golden scoring fixture.

Generates the synthetic "desk" database (seed 0) in a temporary directory,
calibrates on it and writes ``src/csmaq/data/demo_model.json``. Then writes
a short REF/SUT fixture pair to ``tests/data`` and stores the demo model's
score of that pair in ``tests/data/golden_score.json``.

Usage: python3 tools/build_demo_model.py [--jobs N]
"""

import argparse
import json
import tempfile
from pathlib import Path

from csmaq.audio import write_waveform
from csmaq.csm import count_parameters, save_model
from csmaq.pipeline import calibrate, score_pair
from csmaq.synth import ArtifactRecipe, apply_artifact, synth_preset, synth_source

ROOT = Path(__file__).resolve().parents[1]
MODEL = ROOT / "src" / "csmaq" / "data" / "demo_model.json"
FIXTURES = ROOT / "tests" / "data"
SEED = 0
FIXTURE_SEED = 424242


def write_fixture():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    ref = synth_source("mixed", 2.0, FIXTURE_SEED)
    recipe = ArtifactRecipe("combination", 1.0, {"parts": (ArtifactRecipe("lowpass", 0.5),
                                                           ArtifactRecipe("additive-noise", 0.4))})
    sut = apply_artifact(ref, recipe, FIXTURE_SEED)
    write_waveform(FIXTURES / "fixture_ref.wav", ref)
    write_waveform(FIXTURES / "fixture_sut.wav", sut)
    return FIXTURES / "fixture_ref.wav", FIXTURES / "fixture_sut.wav"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        db, _ = synth_preset("desk", tmp, SEED, n_jobs=args.jobs)
        est = calibrate(db, n_jobs=args.jobs)
    save_model(est.model_, MODEL)
    print(est.report_.to_text())
    print(f"wrote {MODEL} ({count_parameters(est.model_)['total']} parameters)")
    ref, sut = write_fixture()
    res, _, _ = score_pair(ref, sut, est.model_)
    golden = {"ref": ref.name, "sut": sut.name, "model": MODEL.name, "score": res.score,
              "raw_score": res.raw_score, "term_means": [float(v) for v in res.term_means]}
    (FIXTURES / "golden_score.json").write_text(json.dumps(golden, indent=2) + "\n")
    print(f"golden score {res.score!r}")


if __name__ == "__main__":
    main()
