"""Velocity-threshold (I-VT) fixation detection.

Each sample is labelled by the speed of the step that reaches it; maximal
runs of sub-threshold samples become fixations. Nearby fixations are never
merged, so every fixation on a line of text is preserved.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FIXATION_FLOOR_MS, Fixation, GazeSample
from .errors import MalformedRow, StorageError, TooFewSamples, ZeroTimeDelta

FIXATION_CSV_COLUMNS = ("trial_id", "index", "cx", "cy", "t_start", "t_end", "duration")


@dataclass(frozen=True)
class IvtConfig:
    velocity_threshold: float = 1000.0  # px/s
    min_fixation_duration: float = FIXATION_FLOOR_MS  # ms
    drop_invalid_samples: bool = True

    def __post_init__(self):
        if not self.velocity_threshold > 0:
            raise ValueError("velocity_threshold must be > 0")
        if not self.min_fixation_duration >= 0:
            raise ValueError("min_fixation_duration must be >= 0")


def point_velocity(s_prev: GazeSample, s_next: GazeSample) -> float:
    """Point-to-point speed in px/s."""
    dt = s_next.t - s_prev.t
    if dt == 0:
        raise ZeroTimeDelta(f"two samples share timestamp {s_next.t}")
    return math.hypot(s_next.x - s_prev.x, s_next.y - s_prev.y) / (dt / 1000.0)


def _arrays(samples: Sequence[GazeSample], cfg: IvtConfig):
    if cfg.drop_invalid_samples:
        samples = [s for s in samples if s.valid]
    if len(samples) < 2:
        raise TooFewSamples(f"need at least 2 samples, got {len(samples)}")
    t = np.fromiter((s.t for s in samples), dtype=np.float64, count=len(samples))
    x = np.fromiter((s.x for s in samples), dtype=np.float64, count=len(samples))
    y = np.fromiter((s.y for s in samples), dtype=np.float64, count=len(samples))
    return t, x, y


def sample_velocities(t: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Incoming velocity per sample; the first sample copies the second's."""
    dt = np.diff(t)
    if np.any(dt == 0):
        raise ZeroTimeDelta("two samples share a timestamp")
    v = np.hypot(np.diff(x), np.diff(y)) / (dt / 1000.0)
    return np.concatenate([v[:1], v])


def classify_samples(samples: Sequence[GazeSample], cfg: IvtConfig = IvtConfig()) -> np.ndarray:
    """Boolean mask, True where a (kept) sample is a fixation sample."""
    t, x, y = _arrays(samples, cfg)
    # NaN velocity (invalid samples kept) compares False: saccade
    return sample_velocities(t, x, y) < cfg.velocity_threshold


def filter_short(fixations: Iterable[Fixation], min_duration: float) -> list[Fixation]:
    return [f for f in fixations if f.duration >= min_duration and f.duration > 0]


def detect_fixations(samples: Sequence[GazeSample], cfg: IvtConfig = IvtConfig()) -> list[Fixation]:
    """Group sub-threshold sample runs into fixations and drop short ones.

    Zero-duration runs (single samples) are always dropped since a fixation
    needs ``t_end > t_start``.
    """
    t, x, y = _arrays(samples, cfg)
    is_fix = sample_velocities(t, x, y) < cfg.velocity_threshold
    edges = np.diff(np.concatenate([[0], is_fix.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)  # exclusive
    out = []
    for a, b in zip(starts, stops):
        out.append(Fixation(float(x[a:b].mean()), float(y[a:b].mean()), float(t[a]), float(t[b - 1])))
    return filter_short(out, cfg.min_fixation_duration)


def write_fixations_csv(path, trial_id: str, fixations: Sequence[Fixation]) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(FIXATION_CSV_COLUMNS)
            for i, f in enumerate(fixations):
                w.writerow([trial_id, i, repr(f.cx), repr(f.cy), repr(f.t_start), repr(f.t_end), repr(f.duration)])
    except OSError as e:
        raise StorageError(f"cannot write fixations {path}: {e}") from e


def read_fixations_csv(path) -> list[Fixation]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise StorageError(f"cannot read fixations {path}: {e}") from e
    out = []
    for line_no, row in enumerate(rows, start=2):
        try:
            out.append(Fixation(float(row["cx"]), float(row["cy"]), float(row["t_start"]), float(row["t_end"])))
        except (KeyError, TypeError, ValueError):
            raise MalformedRow(line_no, "bad fixation row") from None
    return out
