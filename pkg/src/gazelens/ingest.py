"""Gaze-log parsing and the dataset manifest.

Gaze logs are UTF-8 CSV with one sample per row (``t,x,y,valid`` by default).
The manifest is JSON-lines: a header object followed by one TrialRecord per
line, each tagged with the schema version.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .core import MIN_FIXATIONS, Fixation, GazeSample, RelevanceLabel, TrialRecord
from .errors import (
    DuplicateTrialId,
    MalformedRow,
    NonMonotonicTime,
    SchemaVersionMismatch,
    StorageError,
)

MANIFEST_VERSION = 1
MANIFEST_FORMAT = "gazelens-manifest"

_TRUE = {"1", "true", "t", "yes", "y"}
_FALSE = {"0", "false", "f", "no", "n"}


@dataclass(frozen=True)
class GazeLogFormat:
    """Column layout of a gaze log.

    ``header`` may be True, False or ``"auto"``; in auto mode the first row
    is a header only when none of its fields parses as a number.
    """

    delimiter: str = ","
    columns: dict = field(default_factory=lambda: {"t": 0, "x": 1, "y": 2, "valid": 3})
    header: Union[bool, str] = "auto"
    n_columns: Optional[int] = None

    def __post_init__(self):
        if set(self.columns) != {"t", "x", "y", "valid"}:
            raise ValueError("column map must cover exactly t, x, y, valid")
        idx = list(self.columns.values())
        if len(set(idx)) != 4 or min(idx) < 0:
            raise ValueError(f"column indices must be distinct and non-negative: {self.columns}")
        if len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")

    @property
    def arity(self) -> int:
        return self.n_columns if self.n_columns is not None else max(self.columns.values()) + 1


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _parse_valid(tok: str, line_no: int) -> bool:
    s = tok.strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise MalformedRow(line_no, f"unparseable validity flag {tok!r}")


def parse_gaze_log(data: Union[bytes, str], fmt: Optional[GazeLogFormat] = None) -> list[GazeSample]:
    """Parse a gaze log into samples, in file order.

    Invalid samples are kept with ``valid=False``; their coordinates may be
    NaN. Raises MalformedRow or NonMonotonicTime with the 1-based line number.
    """
    fmt = fmt or GazeLogFormat()
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise MalformedRow(data[: e.start].count(b"\n") + 1, "not valid UTF-8") from None
    else:
        text = data
    if text.startswith("\ufeff"):
        text = text[1:]

    cols = fmt.columns
    arity = fmt.arity
    samples: list[GazeSample] = []
    first = True
    last_t = -math.inf
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        toks = line.split(fmt.delimiter)
        if first:
            first = False
            is_header = fmt.header is True or (
                fmt.header == "auto" and not any(_is_number(t) for t in toks)
            )
            if is_header:
                if fmt.n_columns is None and len(toks) > arity:
                    arity = len(toks)
                continue
        if len(toks) != arity:
            raise MalformedRow(line_no, f"expected {arity} fields, got {len(toks)}")
        try:
            t = float(toks[cols["t"]])
            x = float(toks[cols["x"]])
            y = float(toks[cols["y"]])
        except ValueError:
            raise MalformedRow(line_no, "unparseable number") from None
        valid = _parse_valid(toks[cols["valid"]], line_no)
        if not (math.isfinite(t) and t >= 0):
            raise MalformedRow(line_no, f"timestamp {t} not finite and non-negative")
        if valid and not (math.isfinite(x) and math.isfinite(y)):
            raise MalformedRow(line_no, "non-finite coordinate on a valid sample")
        if t <= last_t:
            raise NonMonotonicTime(line_no)
        last_t = t
        samples.append(GazeSample(t, x, y, valid))
    return samples


def read_gaze_log(path, fmt: Optional[GazeLogFormat] = None) -> list[GazeSample]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read gaze log {path}: {e}") from e
    return parse_gaze_log(data, fmt)


def format_gaze_log(samples: Iterable[GazeSample]) -> str:
    """Serialize samples in the default log format (with header)."""
    lines = ["t,x,y,valid"]
    for s in samples:
        lines.append(f"{s.t!r},{s.x!r},{s.y!r},{int(s.valid)}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[TrialRecord, ...]
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.trial_id in seen:
                raise DuplicateTrialId(f"duplicate trial_id {r.trial_id!r}")
            seen.add(r.trial_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def usable(self) -> list[TrialRecord]:
        return [r for r in self.records if r.usable]

    def in_split(self, split: str) -> list[TrialRecord]:
        return [r for r in self.records if r.split == split]

    def get(self, trial_id: str) -> TrialRecord:
        for r in self.records:
            if r.trial_id == trial_id:
                return r
        raise KeyError(trial_id)

    def replace_records(self, records: Iterable[TrialRecord]) -> "DatasetManifest":
        return DatasetManifest(tuple(records), self.version)


def build_manifest(trials: Sequence[tuple[TrialRecord, Sequence[Fixation]]]) -> DatasetManifest:
    """Attach fixation counts to trial metadata and mark short trials excluded.

    Trials with fewer than 10 fixations get ``split='excluded'``; the rest stay
    unassigned until balancing and splitting.
    """
    out = []
    seen = set()
    for meta, fixations in trials:
        if meta.trial_id in seen:
            raise DuplicateTrialId(f"duplicate trial_id {meta.trial_id!r}")
        seen.add(meta.trial_id)
        n = len(fixations)
        out.append(replace(meta, fixation_count=n, split="excluded" if n < MIN_FIXATIONS else None))
    return DatasetManifest(tuple(out))


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    header = {"format": MANIFEST_FORMAT, "version": manifest.version, "n_records": len(manifest)}
    lines = [json.dumps(header)]
    for r in manifest.records:
        lines.append(json.dumps({**r.to_dict(), "version": manifest.version}))
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"cannot write manifest {path}: {e}") from e


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise StorageError(f"cannot read manifest {path}: {e}") from e
    if not text.endswith("\n"):
        raise StorageError(f"manifest {path} is truncated (no final newline)")
    rows = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise StorageError(f"manifest {path}: corrupt JSON at line {line_no}: {e}") from e
    if not rows or rows[0].get("format") != MANIFEST_FORMAT:
        raise StorageError(f"manifest {path} has no header")
    header, body = rows[0], rows[1:]
    if header.get("version") != MANIFEST_VERSION:
        raise SchemaVersionMismatch(f"manifest version {header.get('version')!r}, expected {MANIFEST_VERSION}")
    if header.get("n_records") != len(body):
        raise StorageError(f"manifest {path} is truncated: header lists {header.get('n_records')} "
                           f"records, found {len(body)}")
    records = []
    for row in body:
        if row.get("version") != MANIFEST_VERSION:
            raise SchemaVersionMismatch(f"record version {row.get('version')!r}, expected {MANIFEST_VERSION}")
        try:
            records.append(TrialRecord.from_dict(row))
        except (KeyError, ValueError, TypeError) as e:
            raise StorageError(f"manifest {path}: bad record {row.get('trial_id')!r}: {e}") from e
    return DatasetManifest(tuple(records), header["version"])


def read_trial_meta(path) -> list[TrialRecord]:
    """Read a trial metadata CSV (trial_id, participant_id, document_id, label, gaze_path).

    Relative gaze paths resolve against the CSV's directory.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise StorageError(f"cannot read metadata {path}: {e}") from e
    out = []
    for i, row in enumerate(rows, start=2):
        try:
            gaze = Path(row["gaze_path"])
            if not gaze.is_absolute():
                gaze = path.parent / gaze
            out.append(TrialRecord(
                trial_id=row["trial_id"],
                participant_id=row["participant_id"],
                document_id=row["document_id"],
                label=RelevanceLabel(row["label"].strip().lower()),
                gaze_path=str(gaze),
            ))
        except (KeyError, ValueError) as e:
            raise MalformedRow(i, str(e)) from None
    return out
