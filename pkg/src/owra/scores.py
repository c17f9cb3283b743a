"""Score records, fixed-size batching and the CSV formats used for ingestion.

A score file has the header ``sample_id,max_softmax,max_evm,is_unknown``.
File order defines time; ``sample_id`` is carried through untouched.
"""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCORE_HEADER = ("sample_id", "max_softmax", "max_evm", "is_unknown")

# Plain decimal or scientific notation. Rejects "nan", "inf", "1,5", hex, etc.
_NUMBER = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")


class ScoreFileError(ValueError):
    """Malformed score or feature file. ``line`` is 1-based, header is line 1."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"{message}, line {line}")


@dataclass(frozen=True)
class ScoreRecord:
    sample_id: str
    max_softmax: float
    max_evm: float
    is_unknown: bool | None = None

    def __post_init__(self):
        if not (0.0 < self.max_softmax <= 1.0):
            raise ValueError(f"max_softmax {self.max_softmax!r} outside (0, 1]")
        if not (0.0 <= self.max_evm <= 1.0):
            raise ValueError(f"max_evm {self.max_evm!r} outside [0, 1]")


@dataclass(frozen=True)
class Batch:
    """A contiguous block of records. ``index`` is 1-based."""

    index: int
    records: tuple[ScoreRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    @cached_property
    def softmax(self) -> np.ndarray:
        return np.fromiter((r.max_softmax for r in self.records), float, len(self.records))

    @cached_property
    def evm(self) -> np.ndarray:
        return np.fromiter((r.max_evm for r in self.records), float, len(self.records))

    def column(self, which: str) -> np.ndarray:
        if which == "softmax":
            return self.softmax
        if which == "evm":
            return self.evm
        raise ValueError(f"unknown score column {which!r}")


def _parse_number(text: str, field: str, line: int) -> float:
    if not _NUMBER.fullmatch(text):
        raise ScoreFileError(f"non-numeric {field} {text!r}", line)
    return float(text)


def _parse_flag(text: str, line: int) -> bool | None:
    if text == "":
        return None
    if text in ("0", "1"):
        return text == "1"
    raise ScoreFileError(f"is_unknown must be 0, 1 or empty, got {text!r}", line)


def parse_score_rows(lines: Iterable[str], *, operational: bool = False) -> list[ScoreRecord]:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise ScoreFileError("missing header", 1) from None
    if tuple(header) != SCORE_HEADER:
        missing = [c for c in SCORE_HEADER if c not in header]
        what = f"missing column {missing[0]!r}" if missing else f"unexpected header {header!r}"
        raise ScoreFileError(what, 1)

    records = []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 4:
            raise ScoreFileError(f"expected 4 fields, got {len(row)}", line)
        sid, sm_text, ev_text, flag_text = row
        sm = _parse_number(sm_text, "max_softmax", line)
        ev = _parse_number(ev_text, "max_evm", line)
        if not (0.0 < sm <= 1.0) or not (0.0 <= ev <= 1.0):
            raise ScoreFileError("score out of range", line)
        flag = _parse_flag(flag_text, line)
        records.append(ScoreRecord(sid, sm, ev, None if operational else flag))
    return records


def read_score_file(path: str | Path, *, operational: bool = False) -> list[ScoreRecord]:
    """Read a score CSV strictly. With ``operational=True`` ground-truth flags are dropped."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_score_rows(fh, operational=operational)


def _flag_text(flag: bool | None) -> str:
    return "" if flag is None else ("1" if flag else "0")


def format_scores(records: Sequence[ScoreRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_HEADER)
    for r in records:
        # repr() gives the shortest string that round-trips the double exactly
        w.writerow((r.sample_id, repr(float(r.max_softmax)), repr(float(r.max_evm)), _flag_text(r.is_unknown)))
    return buf.getvalue()


def write_score_file(path: str | Path, records: Sequence[ScoreRecord]) -> None:
    Path(path).write_text(format_scores(records), encoding="utf-8")


def batch_stream(records: Sequence[ScoreRecord], n: int) -> list[Batch]:
    """Split into ``len // n`` full batches; the trailing remainder is dropped."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"batch size must be a positive integer, got {n!r}")
    k = len(records) // n
    return [Batch(i + 1, tuple(records[i * n:(i + 1) * n])) for i in range(k)]


# --- feature files -------------------------------------------------------

@dataclass(frozen=True)
class FeatureSet:
    sample_ids: list[str]
    labels: np.ndarray  # int, 0 = unknown
    features: np.ndarray  # (n, M)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def read_feature_file(path: str | Path) -> FeatureSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ScoreFileError("missing header", 1) from None
        dim = len(header) - 2
        expected = ["sample_id", "label"] + [f"f_{j}" for j in range(1, dim + 1)]
        if dim < 1 or header != expected:
            raise ScoreFileError("feature header must be sample_id,label,f_1,...,f_M", 1)
        ids, labels, rows = [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != dim + 2:
                raise ScoreFileError(f"expected {dim + 2} fields, got {len(row)}", line)
            if not row[1].isdigit():
                raise ScoreFileError(f"label must be a non-negative integer, got {row[1]!r}", line)
            vals = [_parse_number(t, f"f_{j + 1}", line) for j, t in enumerate(row[2:])]
            ids.append(row[0])
            labels.append(int(row[1]))
            rows.append(vals)
    feats = np.array(rows, dtype=float).reshape(len(rows), dim)
    return FeatureSet(ids, np.array(labels, dtype=int), feats)


def write_feature_file(path: str | Path, fs: FeatureSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"f_{j}" for j in range(1, fs.dim + 1)])
        for sid, lab, x in zip(fs.sample_ids, fs.labels, fs.features):
            if not all(math.isfinite(v) for v in x):
                raise ValueError(f"non-finite feature for sample {sid!r}")
            w.writerow([sid, int(lab)] + [repr(float(v)) for v in x])
