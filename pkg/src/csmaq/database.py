"""Listening-test databases and their CSV manifest format.

Manifest columns: ``signal_id, treatment_id, ref_path, sut_path,
mean_score, scale`` and an optional ``split``. Relative paths are resolved
against the manifest's directory. ``scale`` is ``MUSHRA`` (0..100) or
``SDG`` (-4..0).
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from ._validation import CsmaqError

COLUMNS = ("signal_id", "treatment_id", "ref_path", "sut_path", "mean_score", "scale")
SCALES = {"MUSHRA": (0.0, 100.0), "SDG": (-4.0, 0.0)}


def sdg_to_mushra(sdg, transparent=100.0, slope=20.0):
    """Linear SDG -> MUSHRA map, -4..0 onto 20..100 by default."""
    return transparent + slope * np.asarray(sdg, dtype=np.float64)


@dataclass(frozen=True)
class DatabaseItem:
    signal_id: str
    treatment_id: str
    ref_path: str
    sut_path: str
    mean_score: float
    scale: str = "MUSHRA"
    split: str = ""

    @property
    def key(self):
        return f"{self.signal_id}/{self.treatment_id}"

    @property
    def mushra_score(self):
        if self.scale == "SDG":
            return float(sdg_to_mushra(self.mean_score))
        return float(self.mean_score)


@dataclass
class ListeningTestDatabase:
    items: list
    root: str = "."
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def __len__(self):
        return len(self.items)

    def validate(self):
        seen = set()
        for idx, it in enumerate(self.items):
            if it.scale not in SCALES:
                raise CsmaqError(f"row {idx}: unknown scale {it.scale!r}")
            lo, hi = SCALES[it.scale]
            if not np.isfinite(it.mean_score) or not lo <= it.mean_score <= hi:
                raise CsmaqError(f"row {idx}: {it.scale} score {it.mean_score} outside [{lo}, {hi}]")
            if (it.signal_id, it.treatment_id) in seen:
                raise CsmaqError(f"row {idx}: duplicate item {it.key}")
            seen.add((it.signal_id, it.treatment_id))

    @property
    def signals(self):
        return sorted({it.signal_id for it in self.items})

    @property
    def splits(self):
        return sorted({it.split for it in self.items})

    def split(self, name):
        items = [it for it in self.items if it.split == name]
        if not items:
            raise CsmaqError(f"database has no split {name!r}")
        return ListeningTestDatabase(items, self.root, f"{self.name}:{name}", dict(self.metadata))

    def scores(self):
        """Mean scores on the MUSHRA scale."""
        return np.array([it.mushra_score for it in self.items])

    def groups(self):
        return np.array([it.signal_id for it in self.items])

    def treatment_counts(self):
        ids, counts = np.unique(self.groups(), return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def pairs(self):
        return [(self.resolve(it.ref_path), self.resolve(it.sut_path)) for it in self.items]


def load_manifest(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise CsmaqError(f"manifest missing columns: {', '.join(missing)}")
        items = []
        for idx, row in enumerate(reader):
            try:
                score = float(row["mean_score"])
            except (TypeError, ValueError):
                raise CsmaqError(f"row {idx}: malformed mean_score {row['mean_score']!r}") from None
            vals = [row[c] for c in COLUMNS[:4]]
            if any(v is None or v.strip() == "" for v in vals):
                raise CsmaqError(f"row {idx}: empty field")
            items.append(DatabaseItem(*[v.strip() for v in vals], score,
                                      (row["scale"] or "").strip().upper(),
                                      (row.get("split") or "").strip()))
    if not items:
        raise CsmaqError(f"empty database: {path}")
    name = os.path.splitext(os.path.basename(path))[0]
    return ListeningTestDatabase(items, os.path.dirname(os.path.abspath(path)), name)


def save_manifest(db, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS + ("split",))
        for it in db.items:
            w.writerow([it.signal_id, it.treatment_id, it.ref_path, it.sut_path,
                        repr(float(it.mean_score)), it.scale, it.split])
