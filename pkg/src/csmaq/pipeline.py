"""Database-level glue: feature extraction with caching, calibration, evaluation."""

import hashlib
import os
from dataclasses import replace

import numpy as np

from . import __version__
from ._validation import CsmaqError
from .audio import PipelineConfig, load_pair
from .calibration import CognitiveSalienceRegressor
from .csm import score
from .evaluation import DEFAULT_BOOTSTRAP_SEED, N_BOOTSTRAP, evaluate_scores
from .features import extract_features, feature_matrix, load_feature_cache, save_feature_cache
from .frontend import FrontEndConfig, config_hash
from .mars import MARSRegressor

BF_SPLIT = "bf"
INTERACTION_SPLIT = "interaction"


def _item_features(args):
    ref_path, sut_path, pipeline, frontend = args
    return extract_features(load_pair(ref_path, sut_path, pipeline), frontend)


def _fingerprint(pairs, pipeline):
    """Identity of the inputs: package version, pipeline settings and file stats."""
    h = hashlib.sha256(f"{__version__}|{sorted(vars(pipeline).items())!r}".encode())
    for path in sorted({p for pair in pairs for p in pair}):
        st = os.stat(path)
        h.update(f"|{os.path.abspath(path)}:{st.st_size}:{st.st_mtime_ns}".encode())
    return h.hexdigest()


def database_features(db, frontend=None, pipeline=None, n_jobs=1, cache=None):
    """Feature series of every item, in database order.

    With `cache` set, features are read from that ``.npz`` file when its
    keys, front-end hash and input fingerprint match, and written to it
    otherwise.
    """
    frontend = frontend or FrontEndConfig()
    pipeline = pipeline or PipelineConfig()
    keys = [it.key for it in db.items]
    want = config_hash(frontend)
    pairs = list(db.pairs())
    fp = _fingerprint(pairs, pipeline) if cache else ""
    if cache and os.path.exists(cache):
        ckeys, feats, cfp = load_feature_cache(cache, with_fingerprint=True)
        if ckeys == keys and cfp == fp and all(f.config_hash == want for f in feats):
            return feats
    jobs = [(r, s, pipeline, frontend) for r, s in pairs]
    if n_jobs == 1:
        feats = [_item_features(j) for j in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            feats = list(pool.map(_item_features, jobs, chunksize=4))
    if cache:
        save_feature_cache(cache, keys, feats, fp)
    return feats


def calibrate(db, features=None, estimator=None, bf_split=BF_SPLIT, interaction_split=INTERACTION_SPLIT,
              config=None, **kw):
    """Fit a model on a database holding both calibration splits.

    `config` (a plain dict) is recorded in the model provenance and the
    calibration report.
    """
    splits = {it.split for it in db.items}
    for name in (bf_split, interaction_split):
        if name not in splits:
            raise CsmaqError(f"missing split {name!r} in database (found: {sorted(splits)})")
    if features is None:
        features = database_features(db, **kw)
    keep = [i for i, it in enumerate(db.items) if it.split in (bf_split, interaction_split)]
    est = estimator or CognitiveSalienceRegressor()
    est.fit([features[i] for i in keep], db.scores()[keep], db.groups()[keep],
            [db.items[i].split == bf_split for i in keep])
    if config:
        est.model_ = replace(est.model_, provenance={**est.model_.provenance, "config": dict(config)})
        est.report_.config = {**est.report_.config, "run": dict(config)}
    return est


def score_pair(ref_path, sut_path, model, frontend=None, pipeline=None, keep_internal=False):
    """Score one REF/SUT file pair. Returns ``(ScoreResult, FeatureSeries, internal or None)``."""
    pair = load_pair(ref_path, sut_path, pipeline or PipelineConfig())
    out = extract_features(pair, frontend or FrontEndConfig(), keep_internal=keep_internal)
    feats, internal = out if keep_internal else (out, None)
    return score(feats, model), feats, internal


def model_scores(model, features):
    return np.array([score(f, model).score for f in features])


def evaluate(model, db, features=None, bootstrap_seed=DEFAULT_BOOTSTRAP_SEED, n_boot=N_BOOTSTRAP,
             config=None, **kw):
    """Score every item of `db` with `model` and compare with the subjective scores."""
    if len(db) == 0:
        raise CsmaqError("empty database")
    if features is None:
        features = database_features(db, **kw)
    return evaluate_scores(model_scores(model, features), db.scores(), [it.key for it in db.items],
                           db.name, bootstrap_seed, n_boot, config)


def mars_baseline(train_features, train_scores, max_terms=21):
    """Additive MARS mapping from the 8 item-mean features to scores."""
    return MARSRegressor(max_terms=max_terms, max_degree=1).fit(feature_matrix(train_features),
                                                                train_scores)
