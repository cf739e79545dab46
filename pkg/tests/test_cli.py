import csv
import io
import json
import os

import jsonschema
import numpy as np
import pytest

from conftest import DATA
from csmaq.audio import write_waveform
from csmaq.cli import main
from csmaq.csm import MODEL_SCHEMA, load_model
from csmaq.database import load_manifest
from csmaq.features import NO_DISTORTION, load_feature_cache
from csmaq.pipeline import database_features, evaluate
from csmaq.synth import synth_source

REF = os.path.join(DATA, "fixture_ref.wav")
SUT = os.path.join(DATA, "fixture_sut.wav")


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def tiny(tiny_db, tmp_path_factory):
    root, db, _ = tiny_db
    cache = str(tmp_path_factory.mktemp("cache") / "features.npz")
    return os.path.join(root, "manifest.csv"), cache


@pytest.fixture(scope="module")
def calibrated(tiny, tmp_path_factory):
    manifest, cache = tiny
    # the output directory is part of the recorded provenance, so both runs write to the same place
    base = tmp_path_factory.mktemp("cal")
    out = base / "out"
    dirs = []
    for k in range(2):
        code, _ = run("calibrate", manifest, "--out", out, "--cache", cache, "--format", "csv")
        assert code == 0
        dirs.append(out.rename(base / f"run{k}"))
    return dirs


def test_golden_score_is_bit_exact():
    with open(os.path.join(DATA, "golden_score.json")) as fh:
        golden = json.load(fh)
    code, text = run("score", REF, SUT, "--format", "csv")
    assert code == 0
    rows = dict(csv.reader(io.StringIO(text)))
    assert float(rows["score"]) == golden["score"]
    assert float(rows["raw_score"]) == golden["raw_score"]
    assert [float(v) for k, v in rows.items() if k.startswith("term:")] == golden["term_means"]


def test_score_text_frames_and_internal(tmp_path):
    frames, internal = tmp_path / "f.csv", tmp_path / "e.npz"
    code, text = run("score", REF, SUT, "--frames", frames, "--dump-internal", internal)
    assert code == 0 and text.startswith("score: ")
    assert "item-mean DMs:" in text and '"target_spl": 65.0' in text
    with open(frames) as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {"qm", "LinDist", "probSpeech"} <= set(rows[0])
    assert json.loads((tmp_path / "f.csv.config.json").read_text())["command"] == "score"
    assert set(np.load(internal).files) >= {"ref_0", "sut_0"}


def test_missing_model_exits_2(tmp_path, capsys):
    code, _ = run("score", REF, SUT, "--model", tmp_path / "absent.json")
    assert code == 2
    assert "model not found" in capsys.readouterr().err


def test_missing_audio_exits_2(tmp_path, capsys):
    code, _ = run("score", tmp_path / "absent.wav", SUT)
    assert code == 2 and "not found" in capsys.readouterr().err


def test_unknown_config_keys_rejected(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"target_spl": 70, "colour": "blue"}))
    code, _ = run("score", REF, SUT, "--config", cfg)
    assert code == 2 and "unknown config keys: colour" in capsys.readouterr().err
    cfg.write_text(json.dumps({"frontend": {"n_bands": 40, "gamma": 1}}))
    monkeypatch.setenv("CSMAQ_CONFIG", str(cfg))
    code, _ = run("inspect-model")
    assert code == 2 and "unknown frontend config keys: gamma" in capsys.readouterr().err


def test_config_file_and_flags_merge(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"target_spl": 70.0, "seed": 4}))
    monkeypatch.setenv("CSMAQ_CONFIG", str(cfg))
    frames = tmp_path / "f.csv"
    assert run("score", REF, SUT, "--frames", frames, "--target-spl", "60")[0] == 0
    used = json.loads((tmp_path / "f.csv.config.json").read_text())
    assert used["target_spl"] == 60.0 and used["seed"] == 4


def test_identical_files_give_floor_dms(tmp_path):
    path = tmp_path / "x.wav"
    write_waveform(str(path), synth_source("music", 2.0, 1))
    out = tmp_path / "f.csv"
    assert run("dump-features", path, path, "--out", out)[0] == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    got = [[float(r[n]) for n in ("RmsModDiff", "NoiseLoudness", "LinDist", "SegNMR", "EHS")] for r in rows]
    np.testing.assert_array_equal(got, np.tile(NO_DISTORTION, (len(rows), 1)))


def test_batch_score_ordering_is_stable_across_jobs(tiny, tmp_path):
    manifest, _ = tiny
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("batch-score", manifest, "--out", a)[0] == 0
    assert run("batch-score", manifest, "--out", b, "--jobs", "2")[0] == 0
    assert a.read_text() == b.read_text()
    keys = [row[0] for row in csv.reader(io.StringIO(a.read_text()))][1:]
    assert keys == [it.key for it in load_manifest(manifest).items]


def test_calibrate_writes_schema_valid_deterministic_model(calibrated):
    first, second = calibrated
    with open(first / "model.json") as fh:
        jsonschema.validate(json.load(fh), MODEL_SCHEMA)
    for name in ("model.json", "candidates.csv", "coefficients.csv", "calibration.json", "calibration.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert load_model(first / "model.json").terms[0].label == "intercept"


def test_evaluate_matches_library(calibrated, tiny, tmp_path):
    manifest, cache = tiny
    model_path = calibrated[0] / "model.json"
    out = tmp_path / "rep"
    code, text = run("evaluate", model_path, manifest, "--cache", cache, "--out", out, "--format", "csv")
    assert code == 0
    row = next(csv.DictReader(io.StringIO(text)))
    db = load_manifest(manifest)
    rep = evaluate(load_model(model_path), db, database_features(db, cache=cache))
    assert float(row["r"]) == rep.r and float(row["rmse"]) == rep.rmse
    assert json.loads((out / "report.json").read_text())["r"] == rep.r


def test_perfect_prediction_reports_r_one(tiny, tmp_path):
    manifest, cache = tiny
    db = load_manifest(manifest)
    scores = tmp_path / "s.csv"
    assert run("batch-score", manifest, "--cache", cache, "--out", scores)[0] == 0
    rows = list(csv.DictReader(open(scores)))
    perfect = tmp_path / "perfect.csv"
    with open(manifest) as src, open(perfect, "w", newline="") as dst:
        reader = csv.DictReader(src)
        w = csv.DictWriter(dst, reader.fieldnames, lineterminator="\n")
        w.writeheader()
        for r, s in zip(reader, rows):
            r["ref_path"] = os.path.join(db.root, r["ref_path"])
            r["sut_path"] = os.path.join(db.root, r["sut_path"])
            r["mean_score"] = s["score"]
            w.writerow(r)
    code, text = run("evaluate", "--format", "csv", "--cache", tmp_path / "c.npz",
                     os.path.join(os.path.dirname(__file__), "..", "src", "csmaq", "data", "demo_model.json"),
                     perfect)
    assert code == 0
    row = next(csv.DictReader(io.StringIO(text)))
    assert float(row["r"]) == 1.0 and float(row["rmse"]) == 0.0


def test_single_signal_interaction_split_errors(tiny, tmp_path, capsys):
    manifest, _ = tiny
    root = os.path.dirname(manifest)
    sub = os.path.join(root, "one_signal.csv")
    with open(manifest) as src, open(sub, "w", newline="") as dst:
        reader = csv.DictReader(src)
        w = csv.DictWriter(dst, reader.fieldnames, lineterminator="\n")
        w.writeheader()
        for r in reader:
            if r["split"] == "bf" or r["signal_id"] == "s00":
                w.writerow(r)
    code, _ = run("calibrate", sub, "--out", tmp_path / "cal")
    assert code == 1
    assert "insufficient signals" in capsys.readouterr().err


def test_malformed_manifest_names_row(tmp_path, capsys):
    bad = tmp_path / "m.csv"
    bad.write_text("signal_id,treatment_id,ref_path,sut_path,mean_score,scale\n"
                   "a,t0,r.wav,s.wav,50,MUSHRA\na,t1,r.wav,s.wav,fifty,MUSHRA\n")
    code, _ = run("batch-score", bad)
    assert code == 1 and "row 1" in capsys.readouterr().err


def test_synth_db_and_dump_features(tmp_path):
    code, text = run("synth-db", "tiny", tmp_path / "db", "--seed", "3")
    assert code == 0 and "78 items" in text
    assert json.loads((tmp_path / "db" / "synth_config.json").read_text())["seed"] == 3
    cache = tmp_path / "f.npz"
    sub = tmp_path / "db" / "head.csv"
    lines = (tmp_path / "db" / "manifest.csv").read_text().splitlines()[:4]
    sub.write_text("\n".join(lines) + "\n")
    assert run("dump-features", "--manifest", sub, "--out", cache)[0] == 0
    keys, feats = load_feature_cache(str(cache))
    assert keys == [it.key for it in load_manifest(str(sub)).items] and len(feats) == 3


def test_dump_features_requires_inputs(capsys):
    assert run("dump-features", "--out", "x.npz")[0] == 2
    assert "needs REF and SUT" in capsys.readouterr().err


def test_inspect_model_reports_parameters():
    code, text = run("inspect-model")
    assert code == 0 and "parameters: " in text and "total=29" in text
    code, text = run("inspect-model", "--format", "csv")
    assert code == 0 and text.splitlines()[0] == "id,label,cem,coefficient,z_mean,z_std"
