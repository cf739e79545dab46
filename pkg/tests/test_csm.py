import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmaq._validation import CsmaqError
from csmaq.csm import (BasisFunction, CsmModel, Dpw, DpwFactor, QualityTerm, count_parameters,
                       default_model, dumps_model, eval_bf, eval_dpw, load_model, loads_model,
                       model_to_dict, quality_terms, reference_model, save_model, score,
                       terms_from_z)
from csmaq.features import DM_NAMES, FeatureSeries

REFERENCE_COEFS = (2.69, 2.61, 1.97, 1.54, 1.64, -1.89, 8.49)


def series(n=10, seed=0, config_hash=""):
    rng = np.random.default_rng(seed)
    dm = np.column_stack([rng.uniform(0, 1, n), rng.uniform(0, 2, n), rng.uniform(0, 3, n),
                          rng.uniform(-40, 0, n), rng.uniform(0, 0.3, n)])
    return FeatureSeries(dm, rng.uniform(0, 1, (n, 3)), config_hash=config_hash)


def flat_bfs():
    return tuple(BasisFunction(m, 0.0) for m in range(len(DM_NAMES)))


def test_reference_model_coefficients():
    m = reference_model()
    assert m.intercept == 58.3
    assert tuple(t.coefficient for t in m.terms[1:]) == REFERENCE_COEFS
    assert m.terms[-1].dpw is None and m.terms[-1].label == "RmsModDiff_Q"


def test_reference_model_at_z_means_scores_intercept():
    m = reference_model()
    q = terms_from_z(np.zeros((5, 7)), m)
    assert np.all(q.sum(axis=1) == 58.3)
    res = score(series(), m)
    assert res.score == 58.3
    np.testing.assert_array_equal(res.qm_series, 58.3)


def test_one_z_std_on_last_term_adds_its_coefficient():
    m = reference_model()
    z = np.zeros((1, 7))
    z[0, 6] = 1.0
    q = terms_from_z(z, m)
    assert q[0, 7] == 8.49
    # drive it through features: the flat basis function is one z-std above a shifted mean
    terms = m.terms[:-1] + (replace(m.terms[-1], z_mean=-1.0, z_std=1.0),)
    res = score(series(), replace(m, terms=terms))
    assert res.score == 58.3 + 8.49
    np.testing.assert_array_equal(res.terms[:, 7], 8.49)


def test_predictor_at_z_mean_contributes_zero():
    bf = BasisFunction(1, 80.0, (0.0,), (-10.0,))
    f = series(6)
    p = eval_bf(bf, f.dm[:, 1])
    m = CsmModel(flat_bfs()[:1] + (bf,) + flat_bfs()[2:],
                 (QualityTerm("Q0", 50.0), QualityTerm("Q1", 3.0, 1, None, 0.0, 1.0)))
    const = FeatureSeries(np.tile(f.dm[0], (6, 1)), f.cem)
    m = replace(m, terms=(m.terms[0], replace(m.terms[1], z_mean=float(p[0]), z_std=2.0)))
    np.testing.assert_array_equal(quality_terms(const, m)[:, 1], 0.0)


def test_bf_arithmetic_and_constant_extrapolation():
    bf = BasisFunction(0, 100.0, (0.0,), (-50.0,), x_min=0.0, x_max=1.5)
    assert eval_bf(bf, 0.0) == 100.0
    assert eval_bf(bf, 1.0) == 50.0
    assert eval_bf(bf, 7.0) == eval_bf(bf, 1.5) == 25.0
    assert eval_bf(bf, -3.0) == 100.0


def test_bf_validation():
    with pytest.raises(CsmaqError):
        BasisFunction(0, 1.0, (0.0, 1.0), (1.0,))
    with pytest.raises(CsmaqError):
        BasisFunction(0, 1.0, (0.0, 1.0, 2.0, 3.0), (1.0,) * 4)
    with pytest.raises(CsmaqError):
        BasisFunction(5, 1.0)


def test_dpw_scalar_cases():
    assert eval_dpw(DpwFactor(0, 4.0, 0.3), 0.3) == 0.5
    np.testing.assert_array_equal(eval_dpw(DpwFactor(0, 0.0, 0.3), np.linspace(-5, 5, 11)), 0.5)
    assert eval_dpw(DpwFactor(0, 10.0, 0.5), 0.73) == pytest.approx(1 / (1 + math.exp(-2.3)), abs=1e-15)
    assert eval_dpw(DpwFactor(0, 10.0, 0.5, inverted=True), 0.73) == pytest.approx(
        1 - 1 / (1 + math.exp(-2.3)), abs=1e-15)


def test_ramp_dpw():
    f = DpwFactor(1, 2.0, 0.25, kind="ramp")
    np.testing.assert_allclose(eval_dpw(f, [0.0, 0.25, 0.5, 0.75, 2.0]), [0, 0, 0.5, 1, 1])
    with pytest.raises(CsmaqError):
        DpwFactor(0, 1.0, 0.0, kind="step")


def test_dpw_bounds_and_monotonicity_on_a_million_draws():
    rng = np.random.default_rng(7)
    n = 10 ** 6
    k = rng.uniform(-100, 100, n)
    mid = rng.uniform(-2, 2, n)
    c = rng.uniform(-3, 3, n)
    dc = rng.uniform(0, 0.5, n)
    for inverted in (False, True):
        f = DpwFactor(0, k, mid, inverted)
        w1 = eval_dpw(f, c)
        w2 = eval_dpw(f, c + dc)
        assert np.all((w1 >= 0) & (w1 <= 1))
        direction = np.sign(k) * (-1 if inverted else 1)
        assert np.all(direction * (w2 - w1) >= 0)


def test_composite_dpw_multiplies_factors():
    d = Dpw("DPW9", (DpwFactor(1, 3.0, 0.4), DpwFactor(2, -2.0, 0.1)))
    cem = np.array([[0.2, 0.5, 0.3], [0.9, 0.1, 0.0]])
    want = eval_dpw(d.factors[0], cem[:, 1]) * eval_dpw(d.factors[1], cem[:, 2])
    np.testing.assert_array_equal(d(cem), want)
    np.testing.assert_array_equal(replace(d, inverted=True)(cem), 1 - want)
    assert d.source == "EPN/PDEV" and d.n_parameters == 4


def test_two_frame_hand_sum():
    bf = BasisFunction(2, 90.0, (0.5,), (-20.0,))
    dpw = Dpw("DPW1", (DpwFactor(0, 2.0, 0.5),))
    bfs = flat_bfs()[:2] + (bf,) + flat_bfs()[3:]
    m = CsmModel(bfs, (QualityTerm("Q0", 40.0), QualityTerm("Q1", 5.0, 2, dpw, 60.0, 10.0),
                       QualityTerm("Q2", -2.0, 2, None, 80.0, 4.0)))
    dm = np.zeros((2, 5))
    dm[:, 2] = [0.5, 1.5]
    cem = np.array([[0.5, 0, 0], [1.0, 0, 0]])
    res = score(FeatureSeries(dm, cem), m)
    w = 1 / (1 + math.exp(-1.0))
    frame0 = 40.0 + 5.0 * (0.5 * 90.0 - 60.0) / 10.0 - 2.0 * (90.0 - 80.0) / 4.0
    frame1 = 40.0 + 5.0 * (w * 70.0 - 60.0) / 10.0 - 2.0 * (70.0 - 80.0) / 4.0
    np.testing.assert_allclose(res.qm_series, [frame0, frame1], rtol=0, atol=1e-12)
    assert res.score == pytest.approx((frame0 + frame1) / 2, abs=1e-12)


@pytest.mark.parametrize("c,want", [(150.0, 100.0), (-20.0, 0.0), (63.25, 63.25)])
def test_constant_series_clamped(c, want):
    m = replace(reference_model(), terms=(QualityTerm("Q0", c),))
    res = score(series(), m)
    assert res.score == want and res.raw_score == c


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(2, 40))
def test_decomposition_and_permutation_invariance(seed, n):
    m = default_model()
    f = series(n, seed, m.config_hash)
    res = score(f, m)
    total = res.terms[:, 0].copy()
    for k in range(1, res.terms.shape[1]):
        total = total + res.terms[:, k]
    np.testing.assert_array_equal(res.qm_series - total, 0.0)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = FeatureSeries(f.dm[perm], f.cem[perm], config_hash=f.config_hash)
    assert score(shuffled, m).raw_score == pytest.approx(res.raw_score, abs=1e-10)


def test_config_hash_mismatch_rejected():
    m = default_model()
    with pytest.raises(CsmaqError, match="hash mismatch"):
        score(series(config_hash="0" * 16), m)


def test_model_validation():
    bfs = flat_bfs()
    with pytest.raises(CsmaqError):
        CsmModel(bfs[:4], (QualityTerm("Q0", 1.0),))
    with pytest.raises(CsmaqError, match="intercept"):
        CsmModel(bfs, (QualityTerm("Q1", 1.0, 0),))
    with pytest.raises(CsmaqError, match="normalizer"):
        CsmModel(bfs, (QualityTerm("Q0", 1.0), QualityTerm("Q1", 1.0, 0, None, 0.0, 0.0)))


@pytest.mark.parametrize("model", [default_model(), reference_model("abc")], ids=["demo", "reference"])
def test_serialization_roundtrip_is_bit_exact(tmp_path, model):
    text = dumps_model(model)
    back = loads_model(text)
    assert back == model and dumps_model(back) == text
    path = tmp_path / "m.json"
    save_model(model, path)
    f = series(25, 3, model.config_hash)
    a, b = score(f, model), score(f, load_model(path))
    np.testing.assert_array_equal(a.qm_series, b.qm_series)
    assert a.score == b.score


def test_schema_rejects_malformed_models():
    d = model_to_dict(default_model())
    for mutate in (lambda x: x.pop("terms"),
                   lambda x: x.update(format="other"),
                   lambda x: x["terms"][0].update(coefficient="high"),
                   lambda x: x["basis_functions"][0].update(dm="Loudness"),
                   lambda x: x.update(unexpected=1)):
        bad = json.loads(json.dumps(d))
        mutate(bad)
        with pytest.raises(CsmaqError, match="invalid model"):
            loads_model(json.dumps(bad))
    with pytest.raises(CsmaqError, match="invalid model"):
        loads_model("{not json")


def test_missing_model_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="model not found"):
        load_model(tmp_path / "nope.json")


def test_count_parameters_intercept_only():
    m = CsmModel(flat_bfs(), (QualityTerm("Q0", 50.0),))
    assert count_parameters(m)["total"] == 1


def test_count_parameters_itemized_example():
    bfs = tuple(BasisFunction(m, 100.0, (0.1, 0.2, 0.3), (-1.0, -1.0, -1.0)) for m in range(5))
    dpws = [Dpw(f"DPW{i}", (DpwFactor(i % 3, 1.0, 0.5),)) for i in range(1, 7)]
    terms = (QualityTerm("Q0", 50.0),) + tuple(
        QualityTerm(f"Q{i + 1}", 1.0, i % 5, dpws[i]) for i in range(6)) + (QualityTerm("Q7", 1.0, 4),)
    items = count_parameters(CsmModel(bfs, terms))
    assert items == {"basis_functions": 5 * (3 * 2 + 1), "dpws": 6 * 2, "coefficients": 8,
                     "normalizers": 7 * 2, "total": 35 + 12 + 8 + 14}


def test_count_parameters_ignores_unreferenced_bfs_and_shared_dpws():
    bfs = tuple(BasisFunction(m, 100.0, (0.1,), (-1.0,)) for m in range(5))
    dpw = Dpw("DPW1", (DpwFactor(0, 1.0, 0.5),))
    m = CsmModel(bfs, (QualityTerm("Q0", 1.0), QualityTerm("Q1", 1.0, 0, dpw), QualityTerm("Q2", 1.0, 1, dpw)))
    assert count_parameters(m) == {"basis_functions": 6, "dpws": 2, "coefficients": 3, "normalizers": 4,
                                   "total": 15}
