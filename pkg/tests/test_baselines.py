import numpy as np
import pytest

from gazelens.baselines import (ForestConfig, SvmConfig, feature_importances, importance_ranking, load_model,
                                predict, save_model, svm_objective, train_forest, train_svm)
from gazelens.errors import HeaderMismatch, NonFiniteFeature, SingleClassInput


def separable(n=40, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(size=(n, 2)) * 0.3 + np.where(y[:, None] == 1, 2.0, -2.0)
    return X, y


def xor(n, rng):
    X = rng.uniform(-1, 1, size=(n, 2))
    return X, ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)


def test_forest_separable_training_accuracy():
    X, y = separable()
    f = train_forest(X, y, ForestConfig(n_trees=25, seed=1))
    assert np.all(f.predict(X) == y)


def test_forest_deterministic():
    X, y = separable(seed=4)
    probe = np.random.default_rng(9).normal(size=(50, 2)) * 3
    a = train_forest(X, y, ForestConfig(n_trees=15, seed=5)).vote_share(probe)
    b = train_forest(X, y, ForestConfig(n_trees=15, seed=5)).vote_share(probe)
    assert np.array_equal(a, b)


def test_forest_parallel_matches_serial():
    X, y = xor(120, np.random.default_rng(2))
    a = train_forest(X, y, ForestConfig(n_trees=8, seed=3))
    b = train_forest(X, y, ForestConfig(n_trees=8, seed=3, n_jobs=2))
    probe = np.random.default_rng(1).uniform(-1, 1, (200, 2))
    assert np.array_equal(a.vote_share(probe), b.vote_share(probe))


def test_forest_xor_held_out():
    rng = np.random.default_rng(11)
    X, y = xor(200, rng)
    Xt, yt = xor(1000, rng)
    f = train_forest(X, y, ForestConfig(n_trees=200, seed=0))
    assert np.mean(f.predict(Xt) == yt) >= 0.9


def test_single_tree_vote_is_tree_prediction():
    X, y = xor(100, np.random.default_rng(3))
    f = train_forest(X, y, ForestConfig(n_trees=1, seed=2))
    probe = np.random.default_rng(4).uniform(-1, 1, (300, 2))
    assert np.array_equal(f.predict(probe), f.trees[0].predict(probe))


def test_majority_vote():
    X, y = xor(100, np.random.default_rng(5))
    f = train_forest(X, y, ForestConfig(n_trees=9, seed=2))
    probe = np.random.default_rng(6).uniform(-1, 1, (300, 2))
    votes = np.stack([t.predict(probe) for t in f.trees])
    assert np.array_equal(f.predict(probe), (votes.sum(axis=0) >= 5).astype(int))


def test_importance_single_signal():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(400, 20))
    y = (X[:, 0] > 0).astype(int)
    imp = feature_importances(train_forest(X, y, ForestConfig(n_trees=50, seed=1)))
    assert imp[0] > 0.5
    assert abs(imp.sum() - 1) <= 1e-9


def test_importance_noise_labels():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(400, 20))
    y = rng.permutation(np.arange(400) % 2)
    imp = feature_importances(train_forest(X, y, ForestConfig(n_trees=100, seed=1)))
    assert imp.max() < 0.2
    assert abs(imp.sum() - 1) <= 1e-9


def test_importance_ranking_sorted():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 4))
    y = (X[:, 2] + 0.3 * X[:, 1] > 0).astype(int)
    rank = importance_ranking(train_forest(X, y, ForestConfig(n_trees=20, seed=0)), list("abcd"))
    assert rank[0][0] == "c"
    vals = [v for _, v in rank]
    assert vals == sorted(vals, reverse=True)


def test_single_class_rejected():
    X = np.zeros((5, 2))
    with pytest.raises(SingleClassInput):
        train_forest(X, np.ones(5))
    with pytest.raises(SingleClassInput):
        train_svm(X, np.zeros(5))


def test_non_finite_rejected():
    X, y = separable()
    X[3, 1] = np.nan
    with pytest.raises(NonFiniteFeature):
        train_svm(X, y)


def test_svm_separable_1d():
    X = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    y = np.array([0, 1, 0, 1])
    m = train_svm(X, y, SvmConfig(seed=3))
    margin, label = predict(m, X)
    assert np.all(np.sign(margin) == np.where(y == 1, 1, -1))
    assert np.array_equal(label, y)


def test_svm_constant_column():
    X, y = separable()
    X = np.hstack([X, np.full((len(X), 1), 7.0)])
    m = train_svm(X, y)
    assert np.all(np.isfinite(m.weights))
    assert np.all(predict(m, X)[1] == y)


def test_svm_symmetric_zero_margin():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(100, 3)) + 1.5
    X = np.vstack([A, -A])
    y = np.r_[np.ones(100), np.zeros(100)].astype(int)
    m = train_svm(X, y, SvmConfig(seed=1))
    assert abs(float(m.margin(np.zeros(3))[0])) < 0.1


def test_svm_epoch_loss_non_increasing():
    X, y = separable(200, seed=3)
    X = X + np.random.default_rng(1).normal(size=X.shape)  # overlap the classes
    m = train_svm(X, y, SvmConfig(epochs=60, seed=2))
    h = np.array(m.loss_history)
    assert np.all(np.diff(h) <= 1e-6)
    Z = m.standardize(X)
    assert svm_objective(m.weights, Z, np.where(y == 1, 1.0, -1.0), m.config.lam) == pytest.approx(h[-1])


def test_save_load_round_trip(tmp_path):
    X, y = xor(80, np.random.default_rng(0))
    probe = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    for model in (train_forest(X, y, ForestConfig(n_trees=5)), train_svm(X, y)):
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert np.array_equal(predict(model, probe)[0], predict(back, probe)[0])
    (tmp_path / "bad.json").write_text('{"kind": "boost"}')
    with pytest.raises(HeaderMismatch):
        load_model(tmp_path / "bad.json")
