import numpy as np
import pytest

from csmaq._validation import CsmaqError
from csmaq.database import (COLUMNS, DatabaseItem, ListeningTestDatabase, load_manifest,
                            save_manifest, sdg_to_mushra)

HEADER = ",".join(COLUMNS) + ",split\n"


def items():
    return [DatabaseItem("a", "t0", "a.wav", "a0.wav", 80.0, split="bf"),
            DatabaseItem("a", "t1", "a.wav", "a1.wav", 40.5, split="bf"),
            DatabaseItem("b", "t0", "b.wav", "b0.wav", -1.5, "SDG", "interaction")]


def write(tmp_path, body, header=HEADER):
    path = tmp_path / "m.csv"
    path.write_text(header + body)
    return str(path)


def test_manifest_roundtrip_is_exact(tmp_path):
    db = ListeningTestDatabase(items(), str(tmp_path), "m")
    path = tmp_path / "m.csv"
    save_manifest(db, str(path))
    back = load_manifest(str(path))
    assert back.items == db.items
    assert back.root == str(tmp_path) and back.name == "m"
    save_manifest(back, str(tmp_path / "again.csv"))
    assert (tmp_path / "again.csv").read_text() == path.read_text()


def test_relative_paths_resolve_against_manifest_dir(tmp_path):
    db = load_manifest(write(tmp_path, "a,t0,a.wav,/abs/s.wav,50,MUSHRA,\n"))
    assert db.pairs() == [(str(tmp_path / "a.wav"), "/abs/s.wav")]


def test_sdg_mapping():
    np.testing.assert_array_equal(sdg_to_mushra([-4.0, -2.0, 0.0]), [20.0, 60.0, 100.0])
    assert DatabaseItem("a", "t", "r", "s", -4.0, "SDG").mushra_score == 20.0
    assert DatabaseItem("a", "t", "r", "s", 0.0, "SDG").mushra_score == 100.0
    db = ListeningTestDatabase(items())
    np.testing.assert_array_equal(db.scores(), [80.0, 40.5, 70.0])


def test_split_groups_and_counts():
    db = ListeningTestDatabase(items(), name="x")
    assert db.splits == ["bf", "interaction"] and db.signals == ["a", "b"]
    assert [it.key for it in db.split("bf").items] == ["a/t0", "a/t1"]
    assert db.treatment_counts() == {"a": 2, "b": 1}
    assert db.groups().tolist() == ["a", "a", "b"]
    with pytest.raises(CsmaqError, match="no split"):
        db.split("test")


@pytest.mark.parametrize("body,match", [
    ("a,t0,a.wav,s.wav,50,MUSHRA,\nb,t0,b.wav,s.wav,high,MUSHRA,\n", "row 1: malformed mean_score"),
    ("a,t0,a.wav,s.wav,50,MUSHRA,\na,t1,,s.wav,50,MUSHRA,\n", "row 1: empty field"),
    ("a,t0,a.wav,s.wav,50,MUSHRA,\na,t0,a.wav,s.wav,60,MUSHRA,\n", "row 1: duplicate item a/t0"),
    ("a,t0,a.wav,s.wav,101,MUSHRA,\n", "row 0: MUSHRA score 101.0 outside"),
    ("a,t0,a.wav,s.wav,0.5,SDG,\n", "row 0: SDG score"),
    ("a,t0,a.wav,s.wav,nan,MUSHRA,\n", "row 0"),
    ("a,t0,a.wav,s.wav,50,MOS,\n", "row 0: unknown scale"),
])
def test_malformed_rows_name_their_index(tmp_path, body, match):
    with pytest.raises(CsmaqError, match=match):
        load_manifest(write(tmp_path, body))


def test_scale_is_case_insensitive(tmp_path):
    db = load_manifest(write(tmp_path, "a,t0,a.wav,s.wav,-1,sdg,\n"))
    assert db.items[0].scale == "SDG" and db.scores().tolist() == [80.0]


def test_missing_columns_and_files(tmp_path):
    with pytest.raises(CsmaqError, match="missing columns: mean_score, scale"):
        load_manifest(write(tmp_path, "a,t0,a.wav,s.wav\n", "signal_id,treatment_id,ref_path,sut_path\n"))
    with pytest.raises(FileNotFoundError, match="manifest not found"):
        load_manifest(str(tmp_path / "absent.csv"))
    with pytest.raises(CsmaqError, match="empty database"):
        load_manifest(write(tmp_path, ""))
