"""Domain types shared by every stage of the pipeline.

All types are frozen dataclasses. Times are milliseconds from trial onset,
coordinates are screen pixels with y growing downward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import BelowFloor

SCREEN_W = 1680
SCREEN_H = 1050
SAMPLE_RATE_HZ = 250
FIXATION_FLOOR_MS = 110.0
MIN_FIXATIONS = 10

# lower edges of duration levels 2, 3 and 4 (ms)
LEVEL_EDGES = (250.0, 400.0, 550.0)

SPLITS = ("train", "val", "test", "excluded")


def level_of(duration: float) -> int:
    """Map a fixation duration in ms to its marker level 1-4."""
    if not duration >= FIXATION_FLOOR_MS:
        raise BelowFloor(f"fixation duration {duration} ms is below the {FIXATION_FLOOR_MS:g} ms floor")
    level = 1
    for edge in LEVEL_EDGES:
        if duration >= edge:
            level += 1
    return level


class RelevanceLabel(str, Enum):
    RELEVANT = "relevant"
    IRRELEVANT = "irrelevant"

    @property
    def y(self) -> int:
        """Binary target, 1 for relevant."""
        return 1 if self is RelevanceLabel.RELEVANT else 0

    @classmethod
    def from_y(cls, y: int) -> "RelevanceLabel":
        return cls.RELEVANT if int(y) == 1 else cls.IRRELEVANT


@dataclass(frozen=True)
class GazeSample:
    t: float
    x: float
    y: float
    valid: bool = True

    def __post_init__(self):
        for name in ("t", "x", "y"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "valid", bool(self.valid))
        if not (math.isfinite(self.t) and self.t >= 0):
            raise ValueError(f"sample time must be finite and >= 0, got {self.t}")


@dataclass(frozen=True)
class Fixation:
    cx: float
    cy: float
    t_start: float
    t_end: float

    def __post_init__(self):
        # plain floats keep reprs and serialized output free of numpy scalar types
        for name in ("cx", "cy", "t_start", "t_end"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def level(self) -> int:
        return level_of(self.duration)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "t_start": self.t_start, "t_end": self.t_end}

    @classmethod
    def from_dict(cls, d: dict) -> "Fixation":
        return cls(float(d["cx"]), float(d["cy"]), float(d["t_start"]), float(d["t_end"]))


def _clamp(v: float, hi: float) -> float:
    # half-open screen interval [0, hi)
    if v < 0:
        return 0.0
    if v >= hi:
        return math.nextafter(float(hi), 0.0)
    return v


@dataclass(frozen=True)
class Scanpath:
    """Time-ordered fixations of one trial on one stimulus.

    Centroids outside the screen are clamped at construction; each clamp is
    recorded in ``notes`` so the fixation count is preserved.
    """

    fixations: tuple[Fixation, ...]
    screen_w: float = SCREEN_W
    screen_h: float = SCREEN_H
    trial_id: str = ""
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        fixes = []
        notes = list(self.notes)
        for i, f in enumerate(self.fixations):
            cx, cy = _clamp(f.cx, self.screen_w), _clamp(f.cy, self.screen_h)
            if (cx, cy) != (f.cx, f.cy):
                notes.append(f"fixations[{i}]: centroid ({f.cx}, {f.cy}) clamped to screen")
                f = Fixation(cx, cy, f.t_start, f.t_end)
            fixes.append(f)
        object.__setattr__(self, "fixations", tuple(fixes))
        object.__setattr__(self, "notes", tuple(notes))

    def __len__(self) -> int:
        return len(self.fixations)

    def centroids(self) -> np.ndarray:
        """(n, 2) float64 array of (cx, cy)."""
        return np.array([(f.cx, f.cy) for f in self.fixations], dtype=np.float64).reshape(-1, 2)

    def times(self) -> np.ndarray:
        """(n, 2) float64 array of (t_start, t_end)."""
        return np.array([(f.t_start, f.t_end) for f in self.fixations], dtype=np.float64).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "screen_w": self.screen_w,
            "screen_h": self.screen_h,
            "fixations": [f.to_dict() for f in self.fixations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scanpath":
        return cls(
            tuple(Fixation.from_dict(f) for f in d["fixations"]),
            screen_w=d.get("screen_w", SCREEN_W),
            screen_h=d.get("screen_h", SCREEN_H),
            trial_id=d.get("trial_id", ""),
        )


@dataclass(frozen=True)
class TrialRecord:
    """One row of the dataset manifest.

    ``fixation_count`` is None until fixations have been detected; ``split``
    is None while unassigned (including trials dropped by class balancing).
    """

    trial_id: str
    participant_id: str
    document_id: str
    label: RelevanceLabel
    fixation_count: Optional[int] = None
    gaze_path: Optional[str] = None
    fixation_path: Optional[str] = None
    image_path: Optional[str] = None
    split: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "label", RelevanceLabel(self.label))
        if self.split is not None and self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.fixation_count is not None:
            short = self.fixation_count < MIN_FIXATIONS
            if short != (self.split == "excluded"):
                raise ValueError(
                    f"trial {self.trial_id}: split must be 'excluded' exactly when "
                    f"fixation_count < {MIN_FIXATIONS} (count={self.fixation_count}, split={self.split})"
                )
        elif self.split is not None:
            raise ValueError(f"trial {self.trial_id}: split assigned before fixation count is known")

    @property
    def usable(self) -> bool:
        return self.fixation_count is not None and self.fixation_count >= MIN_FIXATIONS

    def to_dict(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "participant_id": self.participant_id,
            "document_id": self.document_id,
            "label": self.label.value,
            "fixation_count": self.fixation_count,
            "gaze_path": self.gaze_path,
            "fixation_path": self.fixation_path,
            "image_path": self.image_path,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(
            trial_id=str(d["trial_id"]),
            participant_id=str(d["participant_id"]),
            document_id=str(d["document_id"]),
            label=RelevanceLabel(d["label"]),
            fixation_count=d.get("fixation_count"),
            gaze_path=d.get("gaze_path"),
            fixation_path=d.get("fixation_path"),
            image_path=d.get("image_path"),
            split=d.get("split"),
        )


@dataclass(frozen=True)
class Violation:
    field: str
    index: Optional[int]
    kind: str
    message: str = ""


def validate_scanpath(sp: Scanpath) -> list[Violation]:
    """Report every broken Scanpath invariant. Never raises."""
    out: list[Violation] = []
    prev: Optional[Fixation] = None
    for i, f in enumerate(sp.fixations):
        vals = (f.cx, f.cy, f.t_start, f.t_end)
        if not all(math.isfinite(v) for v in vals):
            out.append(Violation("fixations", i, "non-finite", f"non-finite value in {vals}"))
            prev = f
            continue
        if not f.t_end > f.t_start:
            out.append(Violation("fixations", i, "non-positive duration", f"t_end={f.t_end} <= t_start={f.t_start}"))
        elif f.duration < FIXATION_FLOOR_MS:
            out.append(Violation("fixations", i, "below 110 ms floor", f"duration {f.duration} ms"))
        if not (0 <= f.cx < sp.screen_w and 0 <= f.cy < sp.screen_h):
            out.append(Violation("fixations", i, "out of screen", f"centroid ({f.cx}, {f.cy})"))
        if prev is not None:
            if f.t_start < prev.t_start:
                out.append(Violation("fixations", i, "out of order", f"t_start {f.t_start} < previous {prev.t_start}"))
            elif f.t_start < prev.t_end:
                out.append(Violation("fixations", i, "temporal overlap",
                                     f"starts at {f.t_start} before previous ends at {prev.t_end}"))
        prev = f
    if not (sp.screen_w > 0 and sp.screen_h > 0):
        out.append(Violation("screen", None, "bad geometry", f"{sp.screen_w}x{sp.screen_h}"))
    return out
