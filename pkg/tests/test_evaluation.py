import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gazelens.core import RelevanceLabel, TrialRecord
from gazelens.errors import EmptyClass, SingleClassInput
from gazelens.evaluation import (MetricsReport, SplitConfig, balance_and_split, compute_metrics, read_report,
                                 report_rows, roc_auc, run_experiment, split_sizes, write_report)
from gazelens.ingest import DatasetManifest
from gazelens.nn import TrainConfig
from gazelens.baselines import ForestConfig, SvmConfig
from gazelens.render import RenderConfig
from gazelens.synth import generate_dataset

from oracles import auc_pairwise

R, I = RelevanceLabel.RELEVANT, RelevanceLabel.IRRELEVANT


def manifest(n_rel, n_irr, n_excluded=0):
    recs = [TrialRecord(f"r{i}", "p", f"d{i}", R, fixation_count=12) for i in range(n_rel)]
    recs += [TrialRecord(f"i{i}", "p", f"e{i}", I, fixation_count=12) for i in range(n_irr)]
    recs += [TrialRecord(f"x{i}", "p", f"f{i}", R, fixation_count=3, split="excluded") for i in range(n_excluded)]
    return DatasetManifest(tuple(recs))


def counts(m, split):
    recs = m.in_split(split)
    return sum(r.label is R for r in recs), sum(r.label is I for r in recs)


def test_split_sizes():
    assert split_sizes(806) == (484, 161, 161)
    assert split_sizes(10) == (6, 2, 2)


def test_balanced_806():
    m = balance_and_split(manifest(806, 806), SplitConfig(seed=42))
    assert counts(m, "train") == (484, 484)
    assert counts(m, "val") == (161, 161)
    assert counts(m, "test") == (161, 161)


def test_ten_per_class():
    m = balance_and_split(manifest(10, 10))
    assert [counts(m, s) for s in ("train", "val", "test")] == [(6, 6), (2, 2), (2, 2)]


@given(st.integers(2, 40), st.integers(2, 40), st.integers(0, 5), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_partition(n_rel, n_irr, n_ex, seed, balance):
    m = balance_and_split(manifest(n_rel, n_irr, n_ex), SplitConfig(seed=seed, balance=balance))
    assigned = [r for r in m.records if r.split in ("train", "val", "test")]
    assert all(r.usable for r in assigned)
    assert all(r.split == "excluded" for r in m.records if not r.usable)
    ids = [r.trial_id for s in ("train", "val", "test") for r in m.in_split(s)]
    assert len(ids) == len(set(ids)) == len(assigned)
    if balance:
        k = min(n_rel, n_irr)
        assert len(assigned) == 2 * k
        for s in ("train", "val", "test"):
            a, b = counts(m, s)
            assert a == b
    else:
        assert len(assigned) == n_rel + n_irr


def test_split_deterministic():
    a = balance_and_split(manifest(30, 40), SplitConfig(seed=1))
    b = balance_and_split(manifest(30, 40), SplitConfig(seed=1))
    assert a == b


def test_empty_class():
    with pytest.raises(EmptyClass):
        balance_and_split(manifest(5, 1))
    with pytest.raises(EmptyClass):
        balance_and_split(manifest(5, 0))


def test_split_config_validation():
    with pytest.raises(ValueError):
        SplitConfig(fractions=(0.5, 0.2, 0.2))


def test_confusion_example():
    m = MetricsReport.from_confusion(tp=8, fp=2, fn=2, tn=8)
    assert m.accuracy == m.f1 == m.tpr == m.tnr == 0.8


def test_zero_denominators():
    m = MetricsReport.from_confusion(0, 0, 0, 5)
    assert m.tpr is None and m.f1 is None and m.tnr == 1.0


def test_perfect_separation_auc():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auc_oracle_1000_sets():
    rng = np.random.default_rng(0)
    for k in range(1000):
        n = int(rng.integers(2, 200)) if k else 200
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        # coarse levels force plenty of ties
        s = rng.integers(0, int(rng.integers(2, 30)), n) / 7.0 if k % 2 else rng.random(n)
        assert roc_auc(s, y) == auc_pairwise(list(s), list(y))


def test_metric_identities_1000_confusions():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 50, 4))
        m = MetricsReport.from_confusion(tp, fp, fn, tn)
        total = tp + fp + fn + tn
        assert m.accuracy == (None if total == 0 else (tp + tn) / total)
        assert m.f1 == (None if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        assert m.tpr == (None if tp + fn == 0 else tp / (tp + fn))
        assert m.tnr == (None if tn + fp == 0 else tn / (tn + fp))


@given(st.lists(st.floats(0, 1), min_size=4, max_size=80), st.randoms())
def test_metrics_permutation_invariant(scores, rnd):
    y = [i % 2 for i in range(len(scores))]
    pairs = list(zip(scores, y))
    rnd.shuffle(pairs)
    a = compute_metrics(scores, y)
    b = compute_metrics([p[0] for p in pairs], [p[1] for p in pairs])
    assert a == b


@given(st.floats(-5, 5), st.lists(st.integers(0, 1), min_size=2, max_size=50))
def test_constant_scores_half(c, y):
    if len(set(y)) < 2:
        with pytest.raises(SingleClassInput):
            roc_auc([c] * len(y), y)
        assert compute_metrics([c] * len(y), y).roc_auc is None
    else:
        assert roc_auc([c] * len(y), y) == 0.5


def test_compute_metrics_threshold_and_labels():
    m = compute_metrics([0.5, 0.49, 0.7, 0.1], [R, I, "irrelevant", 0])
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 0, 2)
    m = compute_metrics([0.0, -0.1], [1, 0], threshold=0.0)
    assert (m.tp, m.tn) == (1, 1)
    with pytest.raises(ValueError):
        compute_metrics([0.1], [0, 1])


@pytest.fixture(scope="module")
def small_experiment():
    ds = generate_dataset(20, seed=7)
    m = balance_and_split(ds.manifest, SplitConfig(seed=7))
    kw = dict(render_cfg=RenderConfig(32, 32), train_cfg=TrainConfig(epochs=2),
              forest_cfg=ForestConfig(n_trees=10), svm_cfg=SvmConfig(epochs=5), seed=7, scanpaths=ds.scanpaths)
    return m, ds, kw


def test_run_experiment_report(small_experiment, tmp_path):
    m, ds, kw = small_experiment
    res = run_experiment(m, **kw)
    rep = res.report
    assert set(rep["methods"]) == {"cnn", "forest", "svm"}
    assert rep["split_counts"]["train"] == {"relevant": 12, "irrelevant": 12}
    assert len(rep["cnn_training"]) == 2
    assert len(rep["feature_importance"]) == 20
    assert res.images["test"][0].shape == (8, 3, 32, 32)
    write_report(rep, tmp_path / "r.json", tmp_path / "r.csv")
    assert read_report(tmp_path / "r.json") == json.loads(json.dumps(rep))
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 1 + len(report_rows(rep)) == 10
    again = run_experiment(m, **kw).report
    assert json.dumps(again, sort_keys=True) == json.dumps(rep, sort_keys=True)


def test_run_experiment_needs_splits(small_experiment):
    _, ds, kw = small_experiment
    with pytest.raises(EmptyClass):
        run_experiment(ds.manifest, **kw)
