"""Twenty aggregate eye-movement features per scanpath.

These are the classic trial-level summaries used by feature-based relevance
classifiers: fixation and saccade counts, means, spreads and totals, plus
the horizontal/vertical movement measures. Horizontal movement is measured
in screen widths and vertical movement in screen heights.
"""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import LEVEL_EDGES, SAMPLE_RATE_HZ, Scanpath
from .errors import NonFiniteFeature, StorageError, TooFewFixations

HV_RATIO_CAP = 1e6
# a saccade spans at least one sample interval
MIN_SACCADE_MS = 1000.0 / SAMPLE_RATE_HZ


@dataclass(frozen=True)
class FeatureVector:
    fixation_count: float
    mean_fix_dur: float
    sd_fix_dur: float
    total_fix_dur: float
    task_duration: float
    fixation_rate: float
    level1_count: float
    level2_count: float
    level3_count: float
    level4_count: float
    saccade_count: float
    mean_sacc_len: float
    sd_sacc_len: float
    total_path_len: float
    mean_sacc_velocity: float
    mean_sacc_dur: float
    total_h_move: float
    total_v_move: float
    hv_ratio: float
    vertical_scan_speed: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)


FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in fields(FeatureVector))


def extract_features(sp: Scanpath, hv_cap: float = HV_RATIO_CAP) -> FeatureVector:
    """Compute the feature vector of a scanpath with at least two fixations.

    Saccades are the gaps between consecutive fixations: length is the
    centroid distance, duration the time from one fixation's end to the next
    one's start. Standard deviations are population SDs. When there is no
    vertical movement ``hv_ratio`` is reported as ``hv_cap``.
    """
    n = len(sp.fixations)
    if n < 2:
        raise TooFewFixations(f"need at least 2 fixations, got {n}")
    c = sp.centroids()
    tt = sp.times()
    dur = tt[:, 1] - tt[:, 0]
    task = float(tt[-1, 1] - tt[0, 0])

    # duration levels by bin edges; durations below the floor count as level 1
    lvl = 1 + np.searchsorted(np.asarray(LEVEL_EDGES), dur, side="right")
    counts = [float(np.sum(lvl == k)) for k in (1, 2, 3, 4)]

    d = np.diff(c, axis=0)
    sacc_len = np.hypot(d[:, 0], d[:, 1])
    sacc_dur = tt[1:, 0] - tt[:-1, 1]
    sacc_vel = sacc_len / (np.maximum(sacc_dur, MIN_SACCADE_MS) / 1000.0)
    h_move = float(np.sum(np.abs(d[:, 0]))) / sp.screen_w
    v_move = float(np.sum(np.abs(d[:, 1]))) / sp.screen_h
    seconds = task / 1000.0

    return FeatureVector(
        fixation_count=float(n),
        mean_fix_dur=float(dur.mean()),
        sd_fix_dur=float(dur.std()),
        total_fix_dur=float(dur.sum()),
        task_duration=float(task),
        fixation_rate=n / seconds,
        level1_count=counts[0],
        level2_count=counts[1],
        level3_count=counts[2],
        level4_count=counts[3],
        saccade_count=float(n - 1),
        mean_sacc_len=float(sacc_len.mean()),
        sd_sacc_len=float(sacc_len.std()),
        total_path_len=float(sacc_len.sum()),
        mean_sacc_velocity=float(sacc_vel.mean()),
        mean_sacc_dur=float(sacc_dur.mean()),
        total_h_move=h_move,
        total_v_move=v_move,
        hv_ratio=h_move / v_move if v_move > 0 else hv_cap,
        vertical_scan_speed=v_move / seconds,
    )


def feature_matrix(scanpaths: Iterable[Scanpath]) -> np.ndarray:
    rows = [extract_features(sp).as_array() for sp in scanpaths]
    return np.vstack(rows) if rows else np.empty((0, len(FEATURE_NAMES)))


def write_features_csv(path, rows: Iterable[tuple[str, str, FeatureVector]]) -> None:
    """Write (trial_id, label, features) rows."""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("trial_id", "label") + FEATURE_NAMES)
            for trial_id, label, fv in rows:
                w.writerow([trial_id, label] + [repr(v) for v in astuple(fv)])
    except OSError as e:
        raise StorageError(f"cannot write features {path}: {e}") from e


def read_features_csv(path) -> dict[str, tuple[str, FeatureVector]]:
    """Map trial_id -> (label, features)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise StorageError(f"cannot read features {path}: {e}") from e
    out = {}
    for row in rows:
        fv = FeatureVector(*(float(row[name]) for name in FEATURE_NAMES))
        out[row["trial_id"]] = (row["label"], fv)
    return out


def check_finite(X: np.ndarray, what: Optional[str] = None) -> None:
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise NonFiniteFeature(f"non-finite value in {what or 'features'} at {tuple(bad)}")
