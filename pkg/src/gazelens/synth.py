"""Behavioural scanpath simulator.

Reading trials ("relevant") work through the text line by line: a headline
pass, then left-to-right fixations that usually reach the end of each line,
with a return sweep to the next. Skimming trials ("irrelevant") share the
headline pass, then jump a few lines at a time through the body with sparse
fixations and finish on the last two lines. Both end, by default, with a
dwell in the lower-right corner.

Timing lives on a 4 ms grid (250 Hz) so that sample emission followed by
I-VT detection recovers the planned fixations exactly.
"""
from __future__ import annotations

import math
import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (FIXATION_FLOOR_MS, SAMPLE_RATE_HZ, SCREEN_H, SCREEN_W, Fixation, GazeSample,
                   RelevanceLabel, Scanpath, TrialRecord)
from .errors import StorageError
from .fixdet import write_fixations_csv
from .ingest import DatasetManifest, build_manifest, format_gaze_log

SAMPLE_MS = 1000.0 / SAMPLE_RATE_HZ
# consecutive fixations are at least this far apart so every saccade is fast enough to detect
MIN_SACCADE_PX = 40.0
# within-fixation drift stays within +/- this many px per axis (well under the velocity threshold)
DRIFT_PX = 1.0


@dataclass(frozen=True)
class SynthConfig:
    """Simulator parameters. Durations are in ms, lengths in px."""

    screen_w: float = SCREEN_W
    screen_h: float = SCREEN_H
    margin_x: float = 0.15
    margin_y: float = 0.12
    line_height: float = 32.0
    n_lines: int = 14
    n_lines_spread: int = 2
    reading_median_ms: float = 220.0
    skimming_median_ms: float = 160.0
    duration_sigma: float = 0.35
    step_min: float = 60.0
    step_max: float = 110.0
    sweep_min: int = 2
    sweep_max: int = 5
    # skimmers land on the first part of a line and rarely reach its end
    skim_x_range: tuple = (0.05, 0.6)
    jitter: float = 6.0
    dwell: bool = True
    dwell_fixations: int = 2
    dwell_min_ms: float = 550.0
    dwell_max_ms: float = 1100.0
    dwell_pos: tuple = (0.93, 0.93)
    seed: int = 0

    def __post_init__(self):
        if self.line_height <= 0:
            raise ValueError("line_height must be positive")
        if self.n_lines - self.n_lines_spread < 6:
            raise ValueError("need at least 6 lines of text")
        if not 0 < self.step_min <= self.step_max:
            raise ValueError("need 0 < step_min <= step_max")
        if not 1 <= self.sweep_min <= self.sweep_max:
            raise ValueError("need 1 <= sweep_min <= sweep_max")
        lo, hi = self.skim_x_range
        if not 0 <= lo < hi <= 1:
            raise ValueError("skim_x_range must satisfy 0 <= lo < hi <= 1")
        if self.jitter < 0 or self.duration_sigma < 0:
            raise ValueError("jitter and duration_sigma must be non-negative")
        if self.dwell_min_ms < FIXATION_FLOOR_MS or self.dwell_max_ms < self.dwell_min_ms:
            raise ValueError("bad dwell duration range")
        top = self.screen_h * self.margin_y
        if top + (self.n_lines + self.n_lines_spread) * self.line_height > self.screen_h * (1 - self.margin_y):
            raise ValueError("text does not fit in the text region")

    @property
    def left(self) -> float:
        return self.screen_w * self.margin_x

    @property
    def line_width(self) -> float:
        return self.screen_w * (1 - 2 * self.margin_x)

    def line_y(self, k: int) -> float:
        return self.screen_h * self.margin_y + (k + 0.5) * self.line_height


def _snap(ms: float) -> float:
    return SAMPLE_MS * math.ceil(ms / SAMPLE_MS - 1e-9)


def sample_duration(rng: np.random.Generator, median_ms: float, sigma: float) -> float:
    """Lognormal fixation duration, redrawn until it clears the 110 ms floor, on the sample grid."""
    while True:
        d = float(np.exp(rng.normal(math.log(median_ms), sigma)))
        if d >= FIXATION_FLOOR_MS:
            return _snap(d)


def saccade_duration(length: float) -> float:
    """Main-sequence style duration, at least 24 ms on the sample grid."""
    return max(6 * SAMPLE_MS, _snap(20.0 + 0.03 * length))


class _Builder:
    """Accumulates planned (x, y, duration) fixations with jitter and spacing rules."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator, median_ms: float):
        self.cfg, self.rng, self.median = cfg, rng, median_ms
        self.pts: list[tuple[float, float, float]] = []

    def _place(self, x: float, y: float, jitter_y: bool) -> tuple[float, float]:
        cfg = self.cfg
        hi_x, hi_y = cfg.screen_w - 1.0, cfg.screen_h - 1.0
        cand = (min(max(x, 0.0), hi_x), min(max(y, 0.0), hi_y))
        for _ in range(50):
            jx = self.rng.normal(0.0, cfg.jitter) if cfg.jitter > 0 else 0.0
            jy = self.rng.normal(0.0, cfg.jitter) if cfg.jitter > 0 and jitter_y else 0.0
            cand = (min(max(x + jx, 0.0), hi_x), min(max(y + jy, 0.0), hi_y))
            if not self.pts or math.dist(cand, self.pts[-1][:2]) >= MIN_SACCADE_PX:
                return cand
        # still too close: push away from the previous fixation
        px, py = self.pts[-1][:2]
        ang = math.atan2(cand[1] - py, cand[0] - px) if cand != (px, py) else 0.0
        for turn in range(8):
            a = ang + turn * math.pi / 4
            c = (px + MIN_SACCADE_PX * math.cos(a), py + MIN_SACCADE_PX * math.sin(a))
            if 0 <= c[0] <= hi_x and 0 <= c[1] <= hi_y:
                return c
        raise RuntimeError("cannot place fixation")  # unreachable on any sane screen

    def add(self, x: float, y: float, duration: Optional[float] = None, jitter_y: bool = True):
        cx, cy = self._place(x, y, jitter_y)
        d = duration if duration is not None else sample_duration(self.rng, self.median, self.cfg.duration_sigma)
        self.pts.append((cx, cy, d))

    def read_line(self, k: int, end_frac: float):
        """Left-to-right fixations on line k up to ``end_frac`` of the line width.

        The eyes follow the line, so vertical jitter is drawn once per line.
        """
        cfg, rng = self.cfg, self.rng
        start = cfg.left + rng.uniform(0.0, 0.03) * cfg.line_width
        end = cfg.left + end_frac * cfg.line_width
        xs = [start]
        while xs[-1] < end:
            xs.append(xs[-1] + rng.uniform(cfg.step_min, cfg.step_max))
        xs[-1] = end
        if len(xs) > 2 and xs[-1] - xs[-2] < MIN_SACCADE_PX:
            del xs[-2]
        y = cfg.line_y(k) + (rng.normal(0.0, cfg.jitter) if cfg.jitter > 0 else 0.0)
        for x in xs:
            self.add(x, y, jitter_y=False)

    def dwell(self):
        cfg = self.cfg
        x0, y0 = cfg.dwell_pos[0] * cfg.screen_w, cfg.dwell_pos[1] * cfg.screen_h
        n = cfg.dwell_fixations
        for i in range(n):
            # spread along x so the dwell fixations stay separable by a saccade
            dx = (i - (n - 1) / 2) * (MIN_SACCADE_PX + 8.0)
            self.add(x0 + dx, y0, _snap(self.rng.uniform(cfg.dwell_min_ms, cfg.dwell_max_ms)))

    def scanpath(self) -> Scanpath:
        fixes = []
        t = 0.0
        for i, (x, y, d) in enumerate(self.pts):
            if i:
                px, py, _ = self.pts[i - 1]
                t += saccade_duration(math.hypot(x - px, y - py))
            fixes.append(Fixation(x, y, t, t + d))
            t += d
        return Scanpath(tuple(fixes), self.cfg.screen_w, self.cfg.screen_h)


def _n_lines(cfg: SynthConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.n_lines - cfg.n_lines_spread, cfg.n_lines + cfg.n_lines_spread + 1))


def _headline(b: _Builder):
    b.read_line(0, b.rng.uniform(0.5, 0.9))


def generate_reading(cfg: SynthConfig, rng: np.random.Generator) -> Scanpath:
    """A reading trial: every body line read left to right, most to its end."""
    b = _Builder(cfg, rng, cfg.reading_median_ms)
    n = _n_lines(cfg, rng)
    _headline(b)
    body = list(range(1, n))
    n_short = int(rng.integers(0, len(body) // 5 + 1))  # at most 20% of lines end early
    short = set(rng.choice(body, size=n_short, replace=False).tolist()) if n_short else set()
    for k in body:
        frac = rng.uniform(0.55, 0.88) if k in short else rng.uniform(0.92, 1.0)
        b.read_line(k, frac)
    if cfg.dwell:
        b.dwell()
    return b.scanpath()


def generate_skimming(cfg: SynthConfig, rng: np.random.Generator) -> Scanpath:
    """A skimming trial: multi-line vertical jumps through the body, then the last lines."""
    b = _Builder(cfg, rng, cfg.skimming_median_ms)
    n = _n_lines(cfg, rng)
    _headline(b)
    lo, hi = 1, n - 3  # mid-body lines; the last two are visited separately
    n_body = int(rng.integers(3, 7))
    # first sweep leaves the headline; the walk then mostly heads down but turns
    # back up at least once (skimmers re-check passages)
    line = min(lo + int(rng.integers(cfg.sweep_min, cfg.sweep_max + 1)), hi)
    went_up = False
    for j in range(n_body):
        if j:
            step = int(rng.integers(cfg.sweep_min, cfg.sweep_max + 1))
            can_up = line - cfg.sweep_min >= lo
            can_down = line + cfg.sweep_min <= hi
            up = can_up and ((not went_up and j == n_body - 1) or not can_down or rng.random() < 0.3)
            if up:
                line -= min(step, line - lo)
                went_up = True
            elif can_down:
                line += min(step, hi - line)
        b.add(cfg.left + rng.uniform(*cfg.skim_x_range) * cfg.line_width, cfg.line_y(line))
    k_tail = int(rng.integers(2, 5))
    xs = np.sort(rng.uniform(*cfg.skim_x_range, k_tail))
    lines = np.sort(rng.integers(n - 2, n, k_tail))
    for fx, k in zip(xs, lines):
        b.add(cfg.left + fx * cfg.line_width, cfg.line_y(int(k)))
    if cfg.dwell:
        b.dwell()
    return b.scanpath()


GENERATORS = {RelevanceLabel.RELEVANT: generate_reading, RelevanceLabel.IRRELEVANT: generate_skimming}


def trial_rng(seed: int, label: RelevanceLabel, i: int, stream: int = 0) -> np.random.Generator:
    """Per-trial stream: independent of how many trials are generated.

    Stream 0 drives the scanpath, stream 1 the gaze-sample emission.
    """
    cls = 0 if label is RelevanceLabel.RELEVANT else 1
    return np.random.default_rng(np.random.SeedSequence([int(seed), cls, int(i), int(stream)]))


@dataclass(frozen=True)
class SynthDataset:
    manifest: DatasetManifest
    scanpaths: dict  # trial_id -> Scanpath


def generate_dataset(n_per_class: int, cfg: SynthConfig = SynthConfig(),
                     seed: Optional[int] = None) -> SynthDataset:
    """``n_per_class`` trials per label with ids ``synth-{label}-{i}``."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    seed = cfg.seed if seed is None else seed
    trials, paths = [], {}
    for label in (RelevanceLabel.RELEVANT, RelevanceLabel.IRRELEVANT):
        gen = GENERATORS[label]
        for i in range(n_per_class):
            tid = f"synth-{label.value}-{i}"
            sp = replace(gen(cfg, trial_rng(seed, label, i)), trial_id=tid)
            paths[tid] = sp
            meta = TrialRecord(tid, participant_id="synth", document_id=f"doc-{i}", label=label)
            trials.append((meta, sp.fixations))
    return SynthDataset(build_manifest(trials), paths)


def emit_samples(sp: Scanpath, rng: np.random.Generator) -> list[GazeSample]:
    """Inverse-sample a scanpath into 250 Hz gaze samples.

    Each fixation gets samples from its onset to its offset with sub-pixel
    drift; the saccade between two fixations is a straight, uniformly fast
    flight that lands one sample before the next onset. I-VT at 1000 px/s
    recovers the onsets, offsets and (up to drift) centroids.
    """
    out: list[GazeSample] = []
    fx = sp.fixations
    for i, f in enumerate(fx):
        if i:
            prev = fx[i - 1]
            n_iv = int(round((f.t_start - prev.t_end) / SAMPLE_MS))
            # in-flight samples, then a landing sample on the target
            for k in range(1, n_iv - 1):
                a = k / (n_iv - 1)
                out.append(GazeSample(prev.t_end + k * SAMPLE_MS,
                                      prev.cx + a * (f.cx - prev.cx), prev.cy + a * (f.cy - prev.cy)))
            out.append(GazeSample(f.t_start - SAMPLE_MS, f.cx, f.cy))
        n = int(round(f.duration / SAMPLE_MS)) + 1
        drift = rng.uniform(-DRIFT_PX, DRIFT_PX, size=(n, 2))
        drift -= drift.mean(axis=0)  # keep the sample centroid on the planned centroid
        drift = np.clip(drift, -DRIFT_PX, DRIFT_PX)
        for k in range(n):
            out.append(GazeSample(f.t_start + k * SAMPLE_MS, f.cx + float(drift[k, 0]), f.cy + float(drift[k, 1])))
    return out


def export_dataset(ds: SynthDataset, out_dir, seed: int, mode: str = "gaze") -> DatasetManifest:
    """Write a synthetic dataset to disk and return the manifest pointing at it.

    ``mode="gaze"`` writes one 250 Hz gaze log per trial plus ``trials.csv``
    (counts stay unknown until detection); ``mode="fixations"`` writes the
    fixation sequences directly and the manifest carries their counts.
    """
    if mode not in ("gaze", "fixations"):
        raise ValueError(f"unknown export mode {mode!r}")
    out = Path(out_dir).resolve()
    recs = []
    try:
        (out / mode).mkdir(parents=True, exist_ok=True)
        for r in ds.manifest.records:
            sp = ds.scanpaths[r.trial_id]
            path = out / mode / f"{r.trial_id}.csv"
            if mode == "gaze":
                i = int(r.trial_id.rsplit("-", 1)[1])
                path.write_text(format_gaze_log(emit_samples(sp, trial_rng(seed, r.label, i, 1))), encoding="utf-8")
                recs.append(replace(r, fixation_count=None, split=None, gaze_path=str(path)))
            else:
                write_fixations_csv(path, r.trial_id, sp.fixations)
                recs.append(replace(r, fixation_path=str(path)))
        with open(out / "trials.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("trial_id", "participant_id", "document_id", "label", "gaze_path"))
            for r in recs:
                w.writerow((r.trial_id, r.participant_id, r.document_id, r.label.value, r.gaze_path or ""))
    except OSError as e:
        raise StorageError(f"cannot export dataset to {out}: {e}") from e
    return ds.manifest.replace_records(recs)
