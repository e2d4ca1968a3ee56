"""Balancing, splits, metrics and the CNN-versus-baselines experiment."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .baselines import (ForestConfig, SvmConfig, importance_ranking, train_forest, train_svm)
from .core import RelevanceLabel, Scanpath
from .errors import EmptyClass, SingleClassInput, StorageError
from .features import FEATURE_NAMES, check_finite, extract_features
from .fixdet import read_fixations_csv
from .ingest import DatasetManifest
from .nn import MiniVggSpec, TrainConfig, build_minivgg, train
from .render import RenderConfig, image_to_array, render_scanpath

CLASSES = (RelevanceLabel.RELEVANT, RelevanceLabel.IRRELEVANT)


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    balance: bool = True

    def __post_init__(self):
        f = tuple(float(v) for v in self.fractions)
        if len(f) != 3 or any(v < 0 for v in f) or not math.isclose(sum(f), 1.0, abs_tol=1e-9):
            raise ValueError(f"fractions must be three non-negative values summing to 1, got {self.fractions}")
        object.__setattr__(self, "fractions", f)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    """Per-class (train, val, test): rounded train and val, remainder to test."""
    n_train = _round_half_up(fractions[0] * n)
    n_val = min(_round_half_up(fractions[1] * n), n - n_train)
    return n_train, n_val, n - n_train - n_val


def balance_and_split(manifest: DatasetManifest, cfg: SplitConfig = SplitConfig()) -> DatasetManifest:
    """Assign train/val/test to usable trials, class by class.

    With ``balance`` the larger class is first downsampled uniformly to the
    size of the smaller; trials left out keep ``split=None``. Excluded trials
    are untouched.
    """
    rng = np.random.default_rng(cfg.seed)
    pools = {}
    for label in CLASSES:
        ids = [r.trial_id for r in manifest.usable() if r.label is label]
        if len(ids) < 2:
            raise EmptyClass(f"class {label.value!r} has {len(ids)} usable trials, need >= 2")
        pools[label] = ids
    if cfg.balance:
        m = min(len(v) for v in pools.values())
        for label in CLASSES:
            ids = pools[label]
            if len(ids) > m:
                keep = np.sort(rng.choice(len(ids), size=m, replace=False))
                pools[label] = [ids[i] for i in keep]
    assign = {}
    for label in CLASSES:
        ids = pools[label]
        order = rng.permutation(len(ids))
        n_tr, n_va, _ = split_sizes(len(ids), cfg.fractions)
        for pos, i in enumerate(order):
            assign[ids[i]] = "train" if pos < n_tr else "val" if pos < n_tr + n_va else "test"
    out = []
    for r in manifest.records:
        if r.usable:
            r = replace(r, split=assign.get(r.trial_id))
        out.append(r)
    return manifest.replace_records(out)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    tpr: Optional[float]
    tnr: Optional[float]
    accuracy: Optional[float]
    f1: Optional[float]
    roc_auc: Optional[float] = None

    @classmethod
    def from_confusion(cls, tp: int, fp: int, fn: int, tn: int, roc_auc: Optional[float] = None):
        """Rates are None where their denominator is zero."""
        def ratio(a, b):
            return a / b if b else None
        return cls(tp, fp, fn, tn,
                   tpr=ratio(tp, tp + fn),
                   tnr=ratio(tn, tn + fp),
                   accuracy=ratio(tp + tn, tp + fp + fn + tn),
                   f1=ratio(2 * tp, 2 * tp + fp + fn),
                   roc_auc=roc_auc)

    def to_dict(self) -> dict:
        return asdict(self)


def _labels01(labels) -> np.ndarray:
    out = []
    for v in labels:
        if isinstance(v, (RelevanceLabel, str)):
            out.append(RelevanceLabel(v).y)
        else:
            out.append(int(v))
    y = np.asarray(out, dtype=np.int64)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0/1 or relevance labels")
    return y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for tied scores."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _labels01(labels)
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassInput("AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion-based metrics at ``score >= threshold`` plus AUC (None for one class)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _labels01(labels)
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    pred = s >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    try:
        auc = roc_auc(s, y)
    except SingleClassInput:
        auc = None
    return MetricsReport.from_confusion(tp, fp, fn, tn, auc)


# ---------------------------------------------------------------- experiment

@dataclass
class ExperimentResult:
    """``report`` is plain JSON-ready data; the other fields keep the fitted models and inputs."""

    report: dict
    cnn: object = None
    forest: object = None
    svm: object = None
    images: dict = field(default_factory=dict)  # split -> (X, y, trial_ids)
    features: dict = field(default_factory=dict)  # split -> (X, y, trial_ids)


def _load_scanpaths(manifest: DatasetManifest, trial_ids) -> dict[str, Scanpath]:
    out = {}
    for tid in trial_ids:
        r = manifest.get(tid)
        if not r.fixation_path:
            raise StorageError(f"trial {tid} has no fixation file")
        out[tid] = Scanpath(tuple(read_fixations_csv(r.fixation_path)), trial_id=tid)
    return out


def split_members(manifest: DatasetManifest, split: str) -> tuple[list[str], np.ndarray]:
    recs = manifest.in_split(split)
    return [r.trial_id for r in recs], np.array([r.label.y for r in recs], dtype=np.int64)


def run_experiment(manifest: DatasetManifest, render_cfg: RenderConfig = RenderConfig(96, 96),
                   train_cfg: TrainConfig = TrainConfig(), forest_cfg: ForestConfig = ForestConfig(),
                   seed: int = 0, scanpaths: Optional[Mapping[str, Scanpath]] = None,
                   svm_cfg: SvmConfig = SvmConfig(), model_spec: Optional[MiniVggSpec] = None,
                   methods: Sequence[str] = ("cnn", "forest", "svm")) -> ExperimentResult:
    """Train each method on the train split and report metrics on every split.

    ``seed`` replaces the seeds of all three training configs and the CNN
    initialization. Scanpaths come from ``scanpaths`` when given, otherwise
    from each record's fixation file.
    """
    splits = ("train", "val", "test")
    members = {s: split_members(manifest, s) for s in splits}
    if not len(members["train"][0]):
        raise EmptyClass("manifest has no training split; assign splits first")
    all_ids = [t for s in splits for t in members[s][0]]
    sps = dict(scanpaths) if scanpaths is not None else _load_scanpaths(manifest, all_ids)

    result = ExperimentResult(report={
        "seed": seed,
        "split_counts": {s: {"relevant": int(members[s][1].sum()),
                             "irrelevant": int(len(members[s][1]) - members[s][1].sum())} for s in splits},
        "methods": {},
    })
    metrics = result.report["methods"]

    if "cnn" in methods:
        tcfg = replace(train_cfg, seed=seed)
        for s in splits:
            ids, y = members[s]
            dt = np.float64 if tcfg.precision == "f64" else np.float32
            X = np.stack([image_to_array(render_scanpath(sps[t], render_cfg), dt) for t in ids]) if ids else \
                np.empty((0, 3, render_cfg.out_h, render_cfg.out_w), dtype=dt)
            result.images[s] = (X, y, ids)
        spec = model_spec or MiniVggSpec(render_cfg.out_h, render_cfg.out_w)
        net = build_minivgg(spec, tcfg.precision, seed)
        Xv, yv, _ = result.images["val"]
        _, log = train(net, result.images["train"][:2], tcfg, val=(Xv, yv) if len(yv) else None)
        result.cnn = net
        metrics["cnn"] = {s: compute_metrics(net.predict_proba(result.images[s][0]), result.images[s][1]).to_dict()
                          for s in splits if len(result.images[s][1])}
        result.report["cnn_training"] = [asdict(e) for e in log]

    if "forest" in methods or "svm" in methods:
        for s in splits:
            ids, y = members[s]
            X = np.vstack([extract_features(sps[t]).as_array() for t in ids]) if ids else \
                np.empty((0, len(FEATURE_NAMES)))
            check_finite(X, f"{s} features")
            result.features[s] = (X, y, ids)
        Xtr, ytr, _ = result.features["train"]
        if "forest" in methods:
            forest = train_forest(Xtr, ytr, replace(forest_cfg, seed=seed))
            result.forest = forest
            metrics["forest"] = {s: compute_metrics(forest.vote_share(result.features[s][0]),
                                                    result.features[s][1]).to_dict()
                                 for s in splits if len(result.features[s][1])}
            result.report["feature_importance"] = [[n, v] for n, v in importance_ranking(forest, FEATURE_NAMES)]
        if "svm" in methods:
            svm = train_svm(Xtr, ytr, replace(svm_cfg, seed=seed))
            result.svm = svm
            metrics["svm"] = {s: compute_metrics(svm.margin(result.features[s][0]), result.features[s][1],
                                                 threshold=0.0).to_dict()
                              for s in splits if len(result.features[s][1])}
    return result


TABLE_COLUMNS = ("method", "split", "TPR%", "TNR%", "Acc%", "ROC AUC", "F1", "tp", "fp", "fn", "tn")


def report_rows(report: dict) -> list[list]:
    def pct(v):
        return "" if v is None else f"{100 * v:.2f}"

    def num(v):
        return "" if v is None else f"{v:.4f}"

    rows = []
    for method, per_split in report["methods"].items():
        for split, m in per_split.items():
            rows.append([method, split, pct(m["tpr"]), pct(m["tnr"]), pct(m["accuracy"]),
                         num(m["roc_auc"]), num(m["f1"]), m["tp"], m["fp"], m["fn"], m["tn"]])
    return rows


def write_report(report: dict, json_path, csv_path=None) -> None:
    """JSON with everything, plus an optional CSV table of the headline metrics."""
    try:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        Path(json_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(TABLE_COLUMNS)
                w.writerows(report_rows(report))
    except OSError as e:
        raise StorageError(f"cannot write report: {e}") from e


def read_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"cannot read report {path}: {e}") from e
