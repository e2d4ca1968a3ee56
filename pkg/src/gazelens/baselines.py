"""Feature-based baselines: a CART random forest and a linear SVM.

Both are written directly on numpy. The forest grows unpruned Gini trees on
bootstrap resamples with a random feature subset per node; the SVM minimizes
the L2-regularized hinge loss by stochastic subgradient steps of size
1/(lambda*t).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import HeaderMismatch, NonFiniteFeature, SingleClassInput, StorageError


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    max_features: Optional[int] = 4  # None: all features
    bootstrap: bool = True
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass
class Tree:
    """Flat binary tree. Leaves have ``feature == -1``; ``value`` is P(y=1)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    importances: np.ndarray  # unnormalized impurity decrease per feature

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "importances": self.importances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
            np.asarray(d["importances"], dtype=np.float64),
        )


def gini(n_pos: float, n: float) -> float:
    if n == 0:
        return 0.0
    p = n_pos / n
    return 2.0 * p * (1.0 - p)


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best threshold on one feature: (weighted child impurity, threshold) or None."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    # candidate cut after position i (left = [0..i]); needs a value change
    pos_left = np.cumsum(ys)[:-1].astype(np.float64)
    n_left = np.arange(1, n, dtype=np.float64)
    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        valid &= (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not valid.any():
        return None
    total_pos = float(ys.sum())
    n_right = n - n_left
    pos_right = total_pos - pos_left
    p_l = pos_left / n_left
    p_r = pos_right / n_right
    score = n_left * 2 * p_l * (1 - p_l) + n_right * 2 * p_r * (1 - p_r)
    score = np.where(valid, score, np.inf)
    i = int(np.argmin(score))
    return float(score[i]), 0.5 * (xs[i] + xs[i + 1])


def grow_tree(X: np.ndarray, y: np.ndarray, sample_idx: np.ndarray, cfg: ForestConfig,
              rng: np.random.Generator) -> Tree:
    n_total = len(sample_idx)
    n_features = X.shape[1]
    k = n_features if cfg.max_features is None else min(cfg.max_features, n_features)
    feature, threshold, left, right, value = [], [], [], [], []
    importances = np.zeros(n_features)

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    root = new_node(sample_idx)
    stack = [(root, sample_idx, 0)]
    while stack:
        node, idx, depth = stack.pop()
        n = len(idx)
        n_pos = float(y[idx].sum())
        if n_pos == 0 or n_pos == n or n < 2 * cfg.min_samples_leaf:
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        perm = rng.permutation(n_features)
        best = None
        # like the usual CART forests, keep drawing features past k until one splits
        for j, f in enumerate(perm):
            if j >= k and best is not None:
                break
            cand = _best_split(X[idx, f], y[idx], cfg.min_samples_leaf)
            if cand is None:
                continue
            if best is None or cand[0] < best[0] or (cand[0] == best[0] and f < best[2]):
                best = (cand[0], cand[1], int(f))
        if best is None:
            continue
        score, thr, f = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        importances[f] += (n * gini(n_pos, n) - score) / n_total
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold), np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64), np.asarray(value), importances)


def _fit_one(args):
    X, y, cfg, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    n = len(y)
    idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
    return grow_tree(X, y, idx, cfg, rng)


@dataclass
class ForestModel:
    trees: list
    n_features: int
    config: ForestConfig

    def vote_share(self, X: np.ndarray) -> np.ndarray:
        """Fraction of trees voting relevant; this is the forest's score."""
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros(len(X))
        for t in self.trees:
            votes += t.predict(X)
        return votes / len(self.trees)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.vote_share(X) >= 0.5).astype(np.int64)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).ravel()
    if X.ndim != 2 or len(X) != len(y) or len(y) < 2:
        raise ValueError(f"need a 2-D matrix with >= 2 rows matching labels, got {X.shape} / {y.shape}")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("feature matrix contains non-finite values")
    if len(np.unique(y)) < 2:
        raise SingleClassInput("training labels contain a single class")
    return X, y


def train_forest(X, y, cfg: ForestConfig = ForestConfig()) -> ForestModel:
    X, y = _check_xy(X, y)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    jobs = [(X, y, cfg, s) for s in seeds]
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(cfg.n_jobs) as ex:
            trees = list(ex.map(_fit_one, jobs))
    else:
        trees = [_fit_one(j) for j in jobs]
    return ForestModel(trees, X.shape[1], cfg)


def feature_importances(model: ForestModel) -> np.ndarray:
    """Mean decrease in Gini impurity per feature, normalized to sum to 1."""
    acc = np.zeros(model.n_features)
    for t in model.trees:
        s = t.importances.sum()
        if s > 0:
            acc += t.importances / s
    total = acc.sum()
    return acc / total if total > 0 else acc


def importance_ranking(model: ForestModel, names: Sequence[str]) -> list[tuple[str, float]]:
    """(name, importance) sorted descending; ties keep feature-index order."""
    imp = feature_importances(model)
    order = sorted(range(len(imp)), key=lambda i: (-imp[i], i))
    return [(names[i], float(imp[i])) for i in order]


@dataclass(frozen=True)
class SvmConfig:
    lam: float = 1e-3
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("regularization must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class SvmModel:
    """Linear SVM on z-scored features; the last weight is the bias."""

    weights: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    config: SvmConfig
    loss_history: list = field(default_factory=list)

    def standardize(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return np.hstack([Z, np.ones((len(Z), 1))])

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if not np.all(np.isfinite(X)):
            raise NonFiniteFeature("non-finite feature value")
        return self.standardize(X) @ self.weights


def svm_objective(w: np.ndarray, Z: np.ndarray, s: np.ndarray, lam: float) -> float:
    """lam/2 |w|^2 + mean hinge loss, labels ``s`` in {-1, +1}."""
    return float(0.5 * lam * (w @ w) + np.mean(np.maximum(0.0, 1.0 - s * (Z @ w))))


def train_svm(X, y, cfg: SvmConfig = SvmConfig()) -> SvmModel:
    """Stochastic subgradient descent with per-epoch checkpoints.

    After each epoch the average iterate of that epoch replaces the
    checkpoint when it lowers the training objective, so ``loss_history``
    (the checkpoint objective per epoch) never increases. The final
    checkpoint is returned.
    """
    X, y = _check_xy(X, y)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    Z = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])
    s = np.where(y == 1, 1.0, -1.0)
    n, d = Z.shape
    lam = cfg.lam
    radius = 1.0 / math.sqrt(lam)
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(d)
    t = 0
    history = []
    best, best_obj = w, math.inf
    for _ in range(cfg.epochs):
        acc = np.zeros(d)
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            violated = s[i] * (Z[i] @ w) < 1.0
            w = w * (1.0 - eta * lam)
            if violated:
                w = w + (eta * s[i]) * Z[i]
            norm = math.sqrt(w @ w)
            if norm > radius:
                w = w * (radius / norm)
            acc += w
        avg = acc / n
        obj = svm_objective(avg, Z, s, lam)
        if obj <= best_obj:
            best, best_obj = avg, obj
        history.append(best_obj)
    return SvmModel(best, mean, scale, cfg, history)


def predict(model, x) -> tuple[np.ndarray, np.ndarray]:
    """Score and 0/1 label for each row of ``x``.

    SVM scores are signed margins (label 1 when >= 0); forest scores are vote
    shares (label 1 when >= 0.5).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if isinstance(model, SvmModel):
        m = model.margin(x)
        return m, (m >= 0).astype(np.int64)
    score = model.vote_share(x)
    return score, (score >= 0.5).astype(np.int64)


def save_model(model, path) -> None:
    if isinstance(model, ForestModel):
        doc = {"kind": "forest", "n_features": model.n_features, "config": asdict(model.config),
               "trees": [t.to_dict() for t in model.trees]}
    else:
        doc = {"kind": "svm", "config": asdict(model.config), "weights": model.weights.tolist(),
               "mean": model.mean.tolist(), "scale": model.scale.tolist(), "loss_history": model.loss_history}
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write model {path}: {e}") from e


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"cannot read model {path}: {e}") from e
    kind = doc.get("kind")
    if kind == "forest":
        return ForestModel([Tree.from_dict(t) for t in doc["trees"]], doc["n_features"],
                           ForestConfig(**doc["config"]))
    if kind == "svm":
        return SvmModel(np.asarray(doc["weights"]), np.asarray(doc["mean"]), np.asarray(doc["scale"]),
                        SvmConfig(**doc["config"]), list(doc.get("loss_history", [])))
    raise HeaderMismatch(f"unknown model kind {kind!r}")
