import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jnosr import tensor_core as tc
from jnosr.data import KnownSplit, OsrDataset, UnknownPool
from jnosr.embedding import MlpConfig, OsrModel
from jnosr.losses import LossConfig, movr_loss
from jnosr.osr_eval import (HIGHER_IS_UNKNOWN, auc, correlation, detection_score, diagnose, dbi,
                            interpolation_probe, jacobian_norm, jnd, macro_f1,
                            mean_inter_prototype_distance, open_set_predict, path_length,
                            pseudo_label, support_volume_estimate, threshold_at_rejection)


def brute_auc(k, u):
    wins = sum((b > a) + 0.5 * (b == a) for a in k for b in u)
    return wins / (len(k) * len(u))


def model_with(d=3, dz=3, k=2, hidden=(5,), seed=0, **kw):
    return OsrModel.build(MlpConfig(d, hidden, dz), k, np.random.default_rng(seed), **kw)


def linear_model(a):
    """Raw embedding x -> A x (zero hidden layers)."""
    a = np.asarray(a, float)
    m = OsrModel.build(MlpConfig(a.shape[1], (), a.shape[0]), 2, np.random.default_rng(0))
    m.net.weights[0].data = a.T.copy()
    return m


def constant_model(d=3):
    m = model_with(d=d)
    m.net.weights[-1].data[:] = 0.0
    m.net.biases[-1].data[:] = [1.0, 2.0, 2.0]
    return m


def test_auc_examples():
    assert auc([0.1, 0.2], [0.5, 0.9]) == 1.0
    assert auc([0.3, 0.5, 0.1], [0.3, 0.5, 0.1]) == 0.5
    assert auc([0.1, 0.4], [0.2, 0.3]) == 0.5
    with pytest.raises(ValueError):
        auc([], [1.0])


def test_auc_matches_brute_force_on_200_instances():
    rng = np.random.default_rng(0)
    for i in range(200):
        nk, nu = rng.integers(1, 60, 2) if i < 190 else rng.integers(400, 500, 2)
        levels = rng.integers(2, 12)  # coarse grid forces ties
        k = rng.integers(0, levels, nk) / levels
        u = rng.integers(0, levels, nu) / levels
        k64, u64 = k[:, None], u[None, :]
        brute = (np.sum(u64 > k64) + 0.5 * np.sum(u64 == k64)) / (nk * nu)
        assert auc(k, u) == brute
    assert brute_auc([1, 2, 2], [2, 3]) == auc([1, 2, 2], [2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=1, max_size=30),
       st.lists(st.integers(-50, 50), min_size=1, max_size=30))
def test_auc_invariant_under_increasing_transform(k, u):
    k, u = np.array(k) / 10.0, np.array(u) / 10.0
    assert auc(k, u) == pytest.approx(auc(np.exp(k), np.exp(u)), abs=1e-12)
    assert 0.0 <= auc(k, u) <= 1.0


def test_dbi_hand_example():
    z = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], float)
    y = np.array([0, 0, 1, 1])
    assert dbi(z, y) == 0.1
    assert dbi(z + [3.0, -7.0], y) == pytest.approx(0.1, abs=1e-15)
    tight = np.array([[0, 0.25], [0, 0.75], [10, 0.25], [10, 0.75]])
    assert dbi(tight, y) < dbi(z, y)


def test_dbi_matches_sklearn():
    from sklearn.metrics import davies_bouldin_score
    rng = np.random.default_rng(1)
    z = rng.normal(size=(90, 4)) + np.repeat(rng.normal(0, 3, (3, 4)), 30, axis=0)
    y = np.repeat([0, 1, 2], 30)
    assert dbi(z, y) == pytest.approx(davies_bouldin_score(z, y), rel=1e-12)


def test_dbi_errors():
    with pytest.raises(ValueError):
        dbi(np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(ValueError):
        dbi(np.array([[0, 0], [1, 1], [0, 0], [1, 1]], float), [0, 0, 1, 1])


def test_macro_f1_examples():
    assert macro_f1([0, 1, 2], [0, 1, 2]) == 1.0
    assert abs(macro_f1([0, 1, 1, 1], [0, 0, 1, 1]) - 11 / 15) < 1e-12
    # all predicted unknown (index 1) with no unknown truths: class 1 F1 is 0
    assert macro_f1([1, 1], [0, 0], num_classes=2) == 0.0
    with pytest.warns(UserWarning):
        assert macro_f1([0, 0], [0, 0], num_classes=3) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        macro_f1([0, 1], [0])


def test_threshold_examples():
    s = np.arange(1, 11, dtype=float)
    t = threshold_at_rejection(s, 0.1)
    assert 9 < t < 10 and np.sum(s > t) == 1
    # the threshold tends to the max as q -> 0; once 1 - q rounds to 1 nothing is rejected
    assert s.max() - threshold_at_rejection(s, 1e-9) < 1e-7
    assert threshold_at_rejection(s, 1e-17) == s.max()
    assert np.sum(s > threshold_at_rejection(s, 1e-17)) == 0
    same = np.full(7, 0.3)
    assert np.sum(same > threshold_at_rejection(same, 0.1)) == 0
    with pytest.raises(ValueError):
        threshold_at_rejection([], 0.1)
    with pytest.raises(ValueError):
        threshold_at_rejection(s, 0.0)


def test_score_orientation_and_definition():
    assert HIGHER_IS_UNKNOWN
    model = model_with(seed=2)
    x = np.random.default_rng(0).uniform(-1, 1, (6, 3))
    cfg = LossConfig()
    p = pseudo_label(model, x)
    ref = movr_loss(model.similarities(x, cfg.margin), p, cfg.scale).data
    np.testing.assert_array_equal(detection_score(model, x, cfg), ref)
    assert detection_score(model, x[0], cfg).shape == (1,)


def test_pseudo_label_tie_goes_to_lowest_index():
    model = model_with(seed=1)
    x = np.zeros(3)
    f = model.embed(x).data
    model.bank.weight.data = np.stack([f, f])
    assert pseudo_label(model, x).tolist() == [0]


def test_perfect_known_sample_scores_near_zero():
    model = model_with(seed=3)
    x = np.full(3, 0.2)
    f = model.embed(x).data
    model.bank.weight.data = np.stack([f, -f])
    assert detection_score(model, x, LossConfig())[0] < 1e-6


def test_open_set_predict_marks_high_scores_unknown():
    model = model_with(seed=4)
    x = np.random.default_rng(0).uniform(-1, 1, (20, 3))
    cfg = LossConfig()
    s = detection_score(model, x, cfg)
    thr = np.median(s)
    pred = open_set_predict(model, x, cfg, thr)
    assert np.all((pred == 2) == (s > thr))


def test_jacobian_norm_of_linear_map_and_constant():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    m = linear_model(a)
    np.testing.assert_allclose(jacobian_norm(m, np.ones((3, 2)), normalized=False), math.sqrt(30),
                               rtol=1e-14)
    c = constant_model()
    assert np.all(jacobian_norm(c, np.ones((4, 3))) == 0.0)


def test_jacobian_norm_matches_fd():
    model = model_with(d=6, dz=4, hidden=(9, 9), seed=5)
    xs = np.random.default_rng(1).uniform(-1, 1, (5, 6))
    for x in xs:
        fd = tc.fd_jacobian(lambda v: model.embed(v).data, x, 1e-5)
        assert jacobian_norm(model, x)[0] == pytest.approx(np.linalg.norm(fd), rel=1e-6)
    chunked = jacobian_norm(model, xs, chunk=2)
    np.testing.assert_allclose(chunked, jacobian_norm(model, xs), rtol=1e-14)


def test_jnd_antisymmetric_and_zero_on_same_sets():
    model = model_with(seed=6)
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (7, 3))
    assert jnd(model, a, a) == 0.0
    assert jnd(model, a, b) == pytest.approx(-jnd(model, b, a), abs=1e-15)
    with pytest.raises(ValueError):
        jnd(model, a[:0], b)


def test_jnd_with_constant_known_plateau():
    model = linear_model(np.array([[1.0, 0.0], [0.0, 0.0]]))
    # f = (x0, 0) / |x0| is constant wherever x0 > 0
    known = np.array([[0.5, 0.1], [0.7, -0.2]])
    jk = jacobian_norm(model, known)
    assert np.all(jk == 0.0)
    unknown = np.array([[0.0, 0.3]])
    d = jnd(model, known, unknown)
    assert d == pytest.approx(jacobian_norm(model, unknown).mean())


def test_interpolation_probe_endpoints():
    model = model_with(seed=7)
    x0, x1 = np.array([-0.5, 0.2, 0.1]), np.array([0.4, -0.3, 0.9])
    pr = interpolation_probe(model, x0, x1, 11)
    assert pr.shape == (11, 2)
    np.testing.assert_allclose(pr[:, 0], np.linspace(0, 1, 11))
    assert pr[0, 1] == pytest.approx(jacobian_norm(model, x0)[0], rel=1e-13)
    assert pr[-1, 1] == pytest.approx(jacobian_norm(model, x1)[0], rel=1e-13)
    assert interpolation_probe(model, x0, x1, 2).shape == (2, 2)
    with pytest.raises(ValueError):
        interpolation_probe(model, x0, x1, 1)


def test_path_length_examples():
    ident = linear_model(np.eye(3))
    x0, x1 = np.array([-1.0, 0, 0]), np.array([1.0, 0, 0])
    assert path_length(ident, x0, x1, normalized=False) == pytest.approx(2.0, abs=1e-9)
    assert path_length(constant_model(), x0, x1) == 0.0


def test_support_volume_examples():
    c = constant_model()
    assert support_volume_estimate(c, 200, tau=0.0) == 0.0
    model = model_with(seed=8)
    fr = [support_volume_estimate(model, 400, tau=t, seed=1) for t in (0.0, 0.5, 1.0, 2.0, 100.0)]
    assert fr == sorted(fr, reverse=True)
    assert fr[0] == 1.0 and fr[-1] == 0.0
    n = 400
    p = support_volume_estimate(model, n, known_x=np.zeros((5, 3)), seed=2)
    assert math.sqrt(p * (1 - p) / n) <= 0.5 / math.sqrt(n)
    with pytest.raises(ValueError):
        support_volume_estimate(model, 0, tau=0.0)
    with pytest.raises(ValueError):
        support_volume_estimate(model, 10, tau=-1.0)
    with pytest.raises(ValueError):
        support_volume_estimate(model, 10)


def test_inter_prototype_distance_and_correlation():
    m = model_with(k=2)
    m.bank.weight.data = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert mean_inter_prototype_distance(m) == 2.0
    assert correlation([1, 2, 3], [2, 4, 7]) > 0.9
    assert correlation([1, 2, 3], [9, 4, 1], "spearman") == pytest.approx(-1.0)
    assert np.isnan(correlation([1, 1, 1], [1, 2, 3]))


def test_diagnose_report_fields():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (30, 3))
    y = np.repeat([0, 1], 15)
    ds = OsrDataset(KnownSplit(x, y), KnownSplit(x, y), UnknownPool(rng.uniform(-1, 1, (12, 3))), 2, 3)
    rep = diagnose(model_with(seed=9), ds, LossConfig(), step=5, jacobian_samples=10, seed=0)
    assert rep.step == 5 and 0 <= rep.auc <= 1 and rep.dbi >= 0
    assert len(rep.samples) == 20 and sum(s[0] for s in rep.samples) == 10
    assert all(s[2] >= 0 for s in rep.samples)
    assert set(rep.metrics()) == {"acc", "dbi", "auc", "jnd", "mean_inter_proto_dist",
                                  "mean_jn_known", "mean_jn_unknown"}
