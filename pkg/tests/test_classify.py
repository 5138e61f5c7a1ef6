import numpy as np
import pytest
from hypothesis import given, strategies as st

from perfvox.classify import (CvReport, TrainedModel, cross_validate, evaluate, forward, load_model, save_model,
                              stratified_kfold, train, train_logreg)
from perfvox.errors import DegenerateInput, LengthMismatch, ParseError, ShapeMismatch
from perfvox.net import NetConfig, n_params


def test_balanced_folds():
    labels = ["F"] * 10 + ["M"] * 10
    for f in stratified_kfold(labels, 5, seed=3):
        assert sum(labels[i] == "F" for i in f) == 2 and len(f) == 4


def test_canonical_fold_counts():
    labels = np.array(["F"] * 97 + ["M"] * 89)
    folds = stratified_kfold(labels, 5, seed=0)
    assert sorted(len(f) for f in folds) == [37, 37, 37, 37, 38]
    for f in folds:
        assert (labels[f] == "F").sum() in (19, 20)
        assert (labels[f] == "M").sum() in (17, 18)


@given(st.integers(5, 60), st.integers(5, 60), st.integers(2, 5), st.integers(0, 1000))
def test_folds_partition_and_proportional(nf, nm, k, seed):
    labels = ["F"] * nf + ["M"] * nm
    folds = stratified_kfold(labels, k, seed)
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(nf + nm))
    for f in folds:
        n_f = sum(labels[i] == "F" for i in f)
        assert abs(n_f - nf / k) < 1 + 1e-9 and abs((len(f) - n_f) - nm / k) < 1 + 1e-9
    assert [f.tolist() for f in folds] == [f.tolist() for f in stratified_kfold(labels, k, seed)]


def test_fold_errors():
    with pytest.raises(DegenerateInput):
        stratified_kfold(["F"] * 3 + ["M"] * 10, 5)
    with pytest.raises(DegenerateInput):
        stratified_kfold(["F"] * 3 + ["M"] * 3, 1)


def test_evaluate_examples():
    e = evaluate([1, 0, 1, 0], ["F", "M", "F", "M"])
    assert all(v == 1.0 for v in e.metrics().values())
    preds = [1] * 29 + [0] * 1 + [1] * 2 + [0] * 28
    labels = ["F"] * 30 + ["M"] * 30
    e = evaluate(preds, labels)
    assert e.confusion == [[29, 1], [2, 28]]
    assert e.precision_F == 29 / 31 and e.recall_F == 29 / 30
    assert e.precision_M == 28 / 29 and e.recall_M == 28 / 30
    assert e.f1_F == pytest.approx(2 * (29 / 31) * (29 / 30) / (29 / 31 + 29 / 30))
    assert e.accuracy == 57 / 60
    e = evaluate([0.9] * 4, ["F", "M", "F", "M"])
    assert e.recall_F == 1.0 and e.recall_M == 0.0 and "precision_M" in e.zero_division
    assert e.precision_M == 0.0
    with pytest.raises(LengthMismatch):
        evaluate([1, 0], ["F"])


@given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from("FM")), min_size=1, max_size=60), st.randoms())
def test_metrics_permutation_invariant(rows, rnd):
    p, y = zip(*rows)
    e = evaluate(p, y)
    order = list(range(len(rows)))
    rnd.shuffle(order)
    e2 = evaluate([p[i] for i in order], [y[i] for i in order])
    assert e.metrics() == e2.metrics()
    (tp, fn), (fp, tn) = e.confusion
    assert tp + fn + fp + tn == len(rows)
    assert e.accuracy == (tp + tn) / len(rows)
    for k, v in e.metrics().items():
        assert 0 <= v <= 1


def test_logreg_symmetry():
    m = train_logreg(np.array([[1.0], [-1.0]]), ["F", "M"], l2=0.1)
    assert m.theta[0] > 0
    assert abs(m.theta[1]) < 1e-9
    assert forward(m, np.array([0.0])) == pytest.approx(0.5, abs=1e-9)


def test_logreg_duplicate_rows():
    r = np.random.default_rng(0)
    x = r.normal(size=(30, 4))
    y = np.where(x[:, 0] + r.normal(size=30) > 0, "F", "M")
    a = train_logreg(x, y, l2=0.01)
    b = train_logreg(np.vstack([x, x]), np.concatenate([y, y]), l2=0.01)
    assert np.allclose(a.theta, b.theta, atol=1e-7)


@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-3, 1e-2, 1e-1]))
def test_logreg_optimality(seed, l2):
    r = np.random.default_rng(seed)
    x = r.normal(size=(50, 6)) * r.uniform(0.5, 5, size=6)
    y = (x @ r.normal(size=6) + r.normal(size=50) > 0).astype(int)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    m = train_logreg(x, y, l2=l2)
    # independent gradient of mean log-loss + l2 |w|^2 in standardized space
    xs = (x - x.mean(axis=0)) / x.std(axis=0)
    w, b = m.theta[:-1], m.theta[-1]
    p = 1 / (1 + np.exp(-(xs @ w + b)))
    g = np.concatenate([xs.T @ (p - y) / len(y) + 2 * l2 * w, [np.mean(p - y)]])
    assert np.linalg.norm(g) < 1e-6


def test_standardization_uses_training_rows_only():
    r = np.random.default_rng(1)
    x = r.normal(size=(40, 5))
    x[30:] += 100  # held-out rows far away
    y = ["F", "M"] * 20
    train_idx = np.arange(30)
    for m in (train_logreg(x, y, train_idx=train_idx),
              train(NetConfig(epochs=2), x, y, train_idx=train_idx)):
        assert np.allclose(m.mean, x[:30].mean(axis=0), atol=0, rtol=1e-15)
        assert np.all(np.abs(m.standardize(x[:30]).mean(axis=0)) < 1e-9)


def test_trained_model_validation():
    cfg = NetConfig(input_len=3)
    with pytest.raises(ShapeMismatch):
        TrainedModel("cnn", np.zeros(5), np.zeros(3), np.ones(3), config=cfg)
    with pytest.raises(ValueError):
        TrainedModel("logreg", np.zeros(4), np.zeros(3), np.array([1.0, 0.0, 1.0]))
    m = TrainedModel("cnn", np.zeros(n_params(cfg)), np.zeros(3), np.ones(3), config=cfg)
    assert forward(m, np.ones(3)) == 0.5
    with pytest.raises(ShapeMismatch):
        forward(m, np.ones(4))


def test_model_roundtrip(tmp_path):
    r = np.random.default_rng(2)
    x = r.normal(size=(20, 6))
    y = ["F"] * 10 + ["M"] * 10
    m = train(NetConfig(epochs=3, conv_layers=((3, 2),), dense_widths=(4,)), x, y)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert np.array_equal(back.theta, m.theta) and back.config == m.config
    assert np.array_equal(back.predict_proba(x), m.predict_proba(x))
    blob = tmp_path / "m.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ParseError):
        load_model(tmp_path / "m.json")


def test_training_needs_two_per_class():
    with pytest.raises(DegenerateInput):
        train(NetConfig(epochs=1), np.zeros((4, 3)), ["F", "M", "M", "M"])


def test_cv_separable_and_deterministic():
    r = np.random.default_rng(3)
    y = np.array(["F"] * 30 + ["M"] * 30)
    x = r.normal(size=(60, 12))
    x[y == "F", :4] += 3.0  # well separated
    a = cross_validate(x, y, "logreg")
    assert a.accuracy >= 0.9
    b = cross_validate(x, y, "logreg")
    assert a.to_json() == b.to_json()
    assert sum(sum(row) for row in a.aggregate.confusion) == 60
    assert a.to_csv().splitlines()[0].startswith("fold,accuracy,precision_F")
    assert a.to_csv().splitlines()[-1].startswith("all,")


def test_cv_cnn_parallel_matches_serial():
    r = np.random.default_rng(4)
    y = np.array(["F"] * 10 + ["M"] * 10)
    x = r.normal(size=(20, 8))
    cfg = NetConfig(epochs=3, conv_layers=((3, 2),), dense_widths=(4,))
    a = cross_validate(x, y, "cnn", cfg=cfg, jobs=1)
    b = cross_validate(x, y, "cnn", cfg=cfg, jobs=3)
    assert a.to_json() == b.to_json()


def test_permutation_control_near_chance():
    r = np.random.default_rng(5)
    y = np.array(["F"] * 50 + ["M"] * 50)
    x = r.normal(size=(100, 20))
    x[y == "F", :5] += 1.5
    rep = cross_validate(x, y, "logreg", permute_labels=True, seed=1)
    assert rep.label_permuted
    assert abs(rep.accuracy - 0.5) <= 0.15
