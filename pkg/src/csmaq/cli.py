"""Command-line interface.

Every subcommand is a thin wrapper over the library. Settings are merged
from defaults, an optional JSON config file (``--config`` or the
``CSMAQ_CONFIG`` environment variable) and command-line flags, in that
order. Exit codes: 0 ok, 1 domain error, 2 usage or I/O error.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from ._validation import CsmaqError
from .audio import (DEFAULT_MAX_LAG, DEFAULT_SILENCE_RUN, DEFAULT_SILENCE_THRESHOLD,
                    DEFAULT_TARGET_SPL, PipelineConfig, load_pair)
from .csm import count_parameters, default_model, load_model, save_model
from .database import load_manifest
from .evaluation import DEFAULT_BOOTSTRAP_SEED
from .features import (CEM_NAMES, DM_NAMES, export_features_csv, extract_features, save_feature_cache,
                       save_internal)
from .frontend import FrontEndConfig
from .pipeline import calibrate, database_features, evaluate, model_scores, score_pair
from .synth import PRESETS, synth_preset

CONFIG_ENV = "CSMAQ_CONFIG"
log = logging.getLogger("csmaq")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Effective settings of one run; echoed into every output artifact."""

    command: str = ""
    target_spl: float = DEFAULT_TARGET_SPL
    max_lag: int = DEFAULT_MAX_LAG
    silence_threshold: float = DEFAULT_SILENCE_THRESHOLD
    silence_run: int = DEFAULT_SILENCE_RUN
    frontend: dict = field(default_factory=dict)
    seed: int = 0
    bootstrap_seed: int = DEFAULT_BOOTSTRAP_SEED
    jobs: int = 1
    format: str = "text"
    verbosity: int = 0
    inputs: dict = field(default_factory=dict)

    def pipeline(self):
        return PipelineConfig(self.target_spl, self.max_lag, self.silence_threshold, self.silence_run)

    def frontend_config(self):
        return FrontEndConfig(**self.frontend)

    def to_dict(self):
        d = asdict(self)
        d["frontend"] = self.frontend_config().to_dict()
        d["version"] = __version__
        return d


FILE_KEYS = {f.name for f in fields(RunConfig)} - {"command", "inputs"}
FLAG_KEYS = ("target_spl", "max_lag", "silence_threshold", "silence_run", "seed", "bootstrap_seed",
             "jobs", "format")


def read_config_file(path):
    """Settings from a JSON object; unknown keys are rejected."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - FILE_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    fe = data.get("frontend", {})
    if not isinstance(fe, dict):
        raise UsageError("config key 'frontend' must be an object")
    bad = sorted(set(fe) - {f.name for f in fields(FrontEndConfig)})
    if bad:
        raise UsageError(f"unknown frontend config keys: {', '.join(bad)}")
    if data.get("format", "text") not in ("text", "csv"):
        raise UsageError("config key 'format' must be 'text' or 'csv'")
    return data


def build_config(args):
    cfg = RunConfig(command=args.command)
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        for k, v in read_config_file(path).items():
            setattr(cfg, k, v)
    for k in FLAG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            setattr(cfg, k, v)
    cfg.verbosity = args.verbose
    if cfg.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg.frontend_config()  # validate overrides early
    return cfg


def _model(path):
    if path is None:
        return default_model()
    if not os.path.exists(path):
        raise FileNotFoundError(f"model not found: {path}")
    return load_model(path)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --- subcommands -----------------------------------------------------------------

def cmd_score(args, cfg, out):
    cfg.inputs = {"ref": args.ref, "sut": args.sut, "model": args.model or "<bundled demo model>"}
    model = _model(args.model)
    res, feats, internal = score_pair(args.ref, args.sut, model, cfg.frontend_config(), cfg.pipeline(),
                                      keep_internal=bool(args.dump_internal))
    labels = [t.label for t in model.terms]
    means = res.term_means
    if cfg.format == "csv":
        out.write(_csv_text(["quantity", "value"],
                            [["score", repr(res.score)], ["raw_score", repr(res.raw_score)]]
                            + [[f"term:{lab}", repr(float(m))] for lab, m in zip(labels, means)]))
    else:
        out.write(f"score: {res.score:.6f}\n")
        if res.raw_score != res.score:
            out.write(f"raw score (before clamping): {res.raw_score:.6f}\n")
        out.write("term means:\n")
        for t, lab, m in zip(model.terms, labels, means):
            out.write(f"  {t.id:<4}{lab:<28}{m:12.6f}\n")
        out.write("item-mean DMs: " + ", ".join(f"{n}={v:.6g}" for n, v in zip(DM_NAMES, feats.item_mean_dm))
                  + "\n")
        out.write("item-mean CEMs: " + ", ".join(f"{n}={v:.6g}" for n, v in zip(CEM_NAMES, feats.item_mean_cem))
                  + "\n")
        out.write(f"config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n")
    if args.frames:
        header = ["frame", "time", "qm"] + labels + list(DM_NAMES) + list(CEM_NAMES)
        rows = [[n, repr(round(n * feats.hop, 6)), repr(float(res.qm_series[n]))]
                + [repr(float(v)) for v in res.terms[n]]
                + [repr(float(v)) for v in np.concatenate([feats.dm[n], feats.cem[n]])]
                for n in range(feats.n_frames)]
        with open(args.frames, "w") as fh:
            fh.write(_csv_text(header, rows))
        _write_json(args.frames + ".config.json", cfg.to_dict())
    if args.dump_internal:
        save_internal(args.dump_internal, internal)
        _write_json(args.dump_internal + ".config.json", cfg.to_dict())
    return 0


def cmd_batch_score(args, cfg, out):
    cfg.inputs = {"manifest": args.manifest, "model": args.model or "<bundled demo model>"}
    model = _model(args.model)
    db = load_manifest(args.manifest)
    feats = database_features(db, cfg.frontend_config(), cfg.pipeline(), cfg.jobs, args.cache)
    scores = model_scores(model, feats)
    rows = [[it.key, repr(float(s))] for it, s in zip(db.items, scores)]
    if cfg.format == "csv" or args.out:
        text = _csv_text(["key", "score"], rows)
    else:
        text = "".join(f"{k:<32}{float(s):12.6f}\n" for k, s in rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        _write_json(args.out + ".config.json", cfg.to_dict())
        out.write(f"wrote {len(rows)} scores to {args.out}\n")
    else:
        out.write(text)
    return 0


def cmd_calibrate(args, cfg, out):
    cfg.inputs = {"manifest": args.manifest, "out": args.out}
    db = load_manifest(args.manifest)
    feats = database_features(db, cfg.frontend_config(), cfg.pipeline(), cfg.jobs, args.cache)
    est = calibrate(db, feats, bf_split=args.bf_split, interaction_split=args.interaction_split,
                    config=cfg.to_dict())
    os.makedirs(args.out, exist_ok=True)
    save_model(est.model_, os.path.join(args.out, "model.json"))
    est.report_.write_tables(os.path.join(args.out, "candidates.csv"),
                             os.path.join(args.out, "coefficients.csv"))
    _write_json(os.path.join(args.out, "calibration.json"), est.report_.to_dict())
    text = est.report_.to_text()
    with open(os.path.join(args.out, "calibration.txt"), "w") as fh:
        fh.write(text)
    n = count_parameters(est.model_)["total"]
    if cfg.format == "text":
        out.write(text)
    out.write(f"model: {os.path.join(args.out, 'model.json')} ({n} parameters)\n")
    return 0


def cmd_evaluate(args, cfg, out):
    cfg.inputs = {"model": args.model, "manifest": args.manifest, "out": args.out, "split": args.split}
    model = _model(args.model)
    db = load_manifest(args.manifest)
    if args.split:
        db = db.split(args.split)
    feats = database_features(db, cfg.frontend_config(), cfg.pipeline(), cfg.jobs, args.cache)
    rep = evaluate(model, db, feats, bootstrap_seed=cfg.bootstrap_seed, config=cfg.to_dict())
    if args.out:
        rep.write(args.out, cfg.format)
    if cfg.format == "csv":
        out.write(_csv_text(["name", "n_items", "r", "r_ci_low", "r_ci_high", "rmse", "mapped_r",
                             "mapped_rmse", "outliers"],
                            [[rep.name, rep.n_items, repr(rep.r), repr(rep.r_ci[0]), repr(rep.r_ci[1]),
                              repr(rep.rmse), repr(rep.mapped_r), repr(rep.mapped_rmse), rep.outliers]]))
    else:
        out.write(rep.to_text())
    return 0


def cmd_synth_db(args, cfg, out):
    cfg.inputs = {"preset": args.preset, "out": args.out}
    db, _ = synth_preset(args.preset, args.out, cfg.seed, n_jobs=cfg.jobs)
    _write_json(os.path.join(args.out, "synth_config.json"), cfg.to_dict())
    out.write(f"wrote {len(db)} items ({', '.join(db.splits)}) to {os.path.join(args.out, 'manifest.csv')}\n")
    return 0


def cmd_inspect_model(args, cfg, out):
    model = _model(args.model)
    counts = count_parameters(model)
    if cfg.format == "csv":
        rows = [[t.id, t.label, t.dpw.source if t.dpw else "", repr(float(t.coefficient)),
                 "" if t.is_intercept else repr(float(t.z_mean)),
                 "" if t.is_intercept else repr(float(t.z_std))] for t in model.terms]
        out.write(_csv_text(["id", "label", "cem", "coefficient", "z_mean", "z_std"], rows))
        return 0
    out.write(f"model version {model.version}, front-end hash {model.config_hash or '-'}\n")
    out.write("terms:\n")
    for t in model.terms:
        cem = f" [{t.dpw.source}{', inverted' if t.dpw.inverted else ''}]" if t.dpw else ""
        out.write(f"  {t.id:<4}{t.label:<28}{t.coefficient:10.4f}{cem}\n")
    out.write("basis functions:\n")
    for b in model.basis_functions:
        hinges = ", ".join(f"{s:+.4g}*max(0, x-{k:.4g})" for k, s in zip(b.knots, b.slopes))
        out.write(f"  {b.name:<15}{b.intercept:.4f}{' + ' + hinges if hinges else ''}\n")
    out.write("parameters: " + ", ".join(f"{k}={v}" for k, v in counts.items()) + "\n")
    return 0


def cmd_dump_features(args, cfg, out):
    if args.manifest:
        cfg.inputs = {"manifest": args.manifest, "out": args.out}
        db = load_manifest(args.manifest)
        keys = [it.key for it in db.items]
        feats = database_features(db, cfg.frontend_config(), cfg.pipeline(), cfg.jobs)
    else:
        if not (args.ref and args.sut):
            raise UsageError("dump-features needs REF and SUT or --manifest")
        cfg.inputs = {"ref": args.ref, "sut": args.sut, "out": args.out}
        pair = load_pair(args.ref, args.sut, cfg.pipeline())
        keys, feats = ["item"], [extract_features(pair, cfg.frontend_config())]
    if args.out.lower().endswith(".csv"):
        export_features_csv(args.out, keys, feats)
    else:
        save_feature_cache(args.out, keys, feats)
    _write_json(args.out + ".config.json", cfg.to_dict())
    out.write(f"wrote features of {len(feats)} item(s) to {args.out}\n")
    return 0


# --- argument parsing ----------------------------------------------------------------

def _common(p, pipeline=True):
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("--format", choices=("text", "csv"), default=None, help="report format")
    p.add_argument("-v", "--verbose", action="count", default=0)
    if pipeline:
        g = p.add_argument_group("preprocessing")
        g.add_argument("--target-spl", type=float, help="playback level in dB SPL (default 65)")
        g.add_argument("--max-lag", type=int, help="largest delay searched, in samples at 48 kHz")
        g.add_argument("--silence-threshold", type=float, help="silence amplitude threshold (full scale 1)")
        g.add_argument("--silence-run", type=int, help="samples of activity that end a silent edge")
        g.add_argument("--jobs", type=int, help="worker processes for per-item work")


def build_parser():
    parser = argparse.ArgumentParser(prog="csmaq", description="Full-reference audio quality with a "
                                     "cognitive salience model.")
    parser.add_argument("--version", action="version", version=f"csmaq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score one REF/SUT pair")
    p.add_argument("ref")
    p.add_argument("sut")
    p.add_argument("--model", help="model file (default: bundled demo model)")
    p.add_argument("--frames", help="write the per-frame quality series to this CSV file")
    p.add_argument("--dump-internal", help="write excitation patterns (.npz, or .csv)")
    _common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("batch-score", help="score every item of a manifest")
    p.add_argument("manifest")
    p.add_argument("--model")
    p.add_argument("--out", help="CSV output (default: stdout)")
    p.add_argument("--cache", help="feature cache (.npz)")
    _common(p)
    p.set_defaults(func=cmd_batch_score)

    p = sub.add_parser("calibrate", help="fit a model on a database with bf and interaction splits")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cache", help="feature cache (.npz)")
    p.add_argument("--bf-split", default="bf")
    p.add_argument("--interaction-split", default="interaction")
    _common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="compare model scores with subjective scores")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("--out", help="report directory")
    p.add_argument("--split", help="evaluate only this split")
    p.add_argument("--cache", help="feature cache (.npz)")
    p.add_argument("--bootstrap-seed", type=int)
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth-db", help="generate a synthetic listening-test database")
    p.add_argument("preset", choices=sorted(PRESETS))
    p.add_argument("out")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    _common(p, pipeline=False)
    p.set_defaults(func=cmd_synth_db)

    p = sub.add_parser("inspect-model", help="print a model's terms and parameter count")
    p.add_argument("model", nargs="?", help="model file (default: bundled demo model)")
    _common(p, pipeline=False)
    p.set_defaults(func=cmd_inspect_model)

    p = sub.add_parser("dump-features", help="write DM/CEM series (.npz cache or .csv)")
    p.add_argument("ref", nargs="?")
    p.add_argument("sut", nargs="?")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.func(args, cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        msg = str(exc)
        if isinstance(exc, FileNotFoundError) and "not found" not in msg:
            msg = f"file not found: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CsmaqError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
