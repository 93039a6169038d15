"""Reading event files, cutting them into possessions, and cleaning them.

The event file is a CSV with header ``possession_id,event_type,time,x,y``.
Each possession lists its start row (the ball recovery, which fixes the
origin and time zero), its on-ball events, and a final end row.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import EventRecord, PitchBounds, Possession, to_json

CSV_FIELDS = ("possession_id", "event_type", "time", "x", "y")
DEFAULT_START = "Start Possession"
DEFAULT_END = "End Possession"

# drop reasons, in the order they are checked
DROP_REASONS = ("missing-start", "misplaced-start", "missing-end", "mid-sequence-end", "velocity")


class EventFileError(ValueError):
    """Malformed event or vocabulary file."""


class UnknownEventTypeError(ValueError):
    pass


class RawEventRow(NamedTuple):
    possession_id: str
    event_type: str
    time: float
    x: float
    y: float
    line: int = 0


@dataclass(frozen=True)
class EventVocabulary:
    """Event-type names: start (index 0), transient types 1..E, end (E+1)."""

    transient: tuple[str, ...]
    start: str = DEFAULT_START
    end: str = DEFAULT_END

    def __post_init__(self):
        object.__setattr__(self, "transient", tuple(self.transient))
        names = list(self.transient)
        if not names:
            raise EventFileError("vocabulary needs at least one transient event type")
        if len(set(names)) != len(names):
            raise EventFileError("duplicate event names in vocabulary")
        if self.start == self.end:
            raise EventFileError("start and end events need different names")
        for reserved in (self.start, self.end):
            if reserved in names:
                raise EventFileError(f"reserved name {reserved!r} listed as a transient event")

    @property
    def E(self) -> int:
        return len(self.transient)

    def index(self, name: str) -> int:
        if name == self.start:
            return 0
        if name == self.end:
            return self.E + 1
        try:
            return self.transient.index(name) + 1
        except ValueError:
            raise UnknownEventTypeError(f"unknown event type {name!r}") from None

    def name(self, index: int) -> str:
        if index == 0:
            return self.start
        if index == self.E + 1:
            return self.end
        return self.transient[index - 1]

    @classmethod
    def parse(cls, text: str) -> "EventVocabulary":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if len(lines) < 3:
            raise EventFileError("vocabulary file needs start and end names followed by at least one event type")
        return cls(tuple(lines[2:]), start=lines[0], end=lines[1])

    @classmethod
    def load(cls, path) -> "EventVocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self) -> str:
        return "\n".join([self.start, self.end, *self.transient]) + "\n"

    @classmethod
    def generic(cls, E: int) -> "EventVocabulary":
        return cls(tuple(f"event_{e}" for e in range(1, E + 1)))


# -- parsing ---------------------------------------------------------------------------

def _number(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise EventFileError(f"line {line}: {what} {text!r} is not a number") from None
    if not math.isfinite(value):
        raise EventFileError(f"line {line}: {what} {text!r} is not finite")
    return value


def parse_events(source, fill_missing: bool = False) -> list[RawEventRow]:
    """Parse an event CSV given as a path, an open text file, or CSV text.

    With ``fill_missing`` blank x/y cells take the coordinates of the most
    recent row of the same possession; otherwise they are an error.
    """
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        with open(source, encoding="utf-8", newline="") as fh:
            return parse_events(fh, fill_missing)
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise EventFileError("line 1: empty file, header required") from None
    header = [h.strip() for h in header]
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    if tuple(header) != CSV_FIELDS:
        raise EventFileError(f"line 1: header must be {','.join(CSV_FIELDS)}, got {','.join(header)}")
    rows: list[RawEventRow] = []
    last_xy: dict[str, tuple[float, float]] = {}
    for cells in reader:
        line = reader.line_num
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(CSV_FIELDS):
            raise EventFileError(f"line {line}: expected {len(CSV_FIELDS)} fields, got {len(cells)}")
        pid, etype, t, x, y = (c.strip() for c in cells)
        if not pid:
            raise EventFileError(f"line {line}: empty possession_id")
        if not etype:
            raise EventFileError(f"line {line}: empty event_type")
        time = _number(t, "time", line)
        if fill_missing and (x == "" or y == ""):
            if pid not in last_xy:
                raise EventFileError(f"line {line}: missing coordinates with no earlier event to carry forward")
            px, py = last_xy[pid]
            xv = px if x == "" else _number(x, "x", line)
            yv = py if y == "" else _number(y, "y", line)
        else:
            xv = _number(x, "x", line)
            yv = _number(y, "y", line)
        last_xy[pid] = (xv, yv)
        rows.append(RawEventRow(pid, etype, time, xv, yv, line))
    return rows


# -- segmentation and cleaning -------------------------------------------------------------

@dataclass
class CleaningReport:
    n_input: int = 0
    n_retained: int = 0
    dropped: dict = field(default_factory=lambda: {r: 0 for r in DROP_REASONS})
    n_time_clamps: int = 0
    n_coord_clamps: int = 0
    velocity_threshold: float | None = None
    retained_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_input": self.n_input,
            "n_retained": self.n_retained,
            "dropped": dict(self.dropped),
            "n_time_clamps": self.n_time_clamps,
            "n_coord_clamps": self.n_coord_clamps,
            "velocity_threshold": self.velocity_threshold,
        }

    def to_json(self) -> str:
        return to_json(self.to_dict()) + "\n"


def _group(rows: Iterable[RawEventRow]) -> dict[str, list[RawEventRow]]:
    groups: dict[str, list[RawEventRow]] = {}
    for row in rows:
        groups.setdefault(row.possession_id, []).append(row)
    return groups


def _structural_problem(idx: list[int], E: int) -> str | None:
    end = E + 1
    if 0 not in idx:
        return "missing-start"
    if idx[0] != 0 or idx.count(0) > 1:
        return "misplaced-start"
    if end not in idx:
        return "missing-end"
    if idx.index(end) != len(idx) - 1:
        return "mid-sequence-end"
    return None


def clamp_times(times: Sequence[float], clamp_dt: float) -> tuple[list[float], int]:
    """Force strictly increasing times, shifting a tied or late event to
    ``clamp_dt`` after its predecessor. Returns (times, number of clamps)."""
    out = [float(times[0])]
    n = 0
    for t in times[1:]:
        if t > out[-1]:
            out.append(float(t))
        else:
            out.append(out[-1] + clamp_dt)
            n += 1
    return out, n


def build_possessions(
    rows: Sequence[RawEventRow],
    vocab: EventVocabulary,
    bounds: PitchBounds | None = None,
    clamp_dt: float = 0.01,
    velocity_percentile: float | None = 98,
) -> tuple[list[Possession], CleaningReport]:
    """Cut rows into cleaned possessions.

    Rows are grouped by ``possession_id`` (in order of first appearance)
    and sorted by time within a group. Possessions without a leading start
    row, without a final end row, or with an end row before the last event
    are dropped; so are possessions whose fastest planar displacement
    exceeds the ``velocity_percentile`` nearest-rank percentile of all
    inter-event speeds in the structurally valid possessions. Pass
    ``velocity_percentile=None`` to skip the speed filter.
    """
    if not clamp_dt > 0:
        raise ValueError("clamp_dt must be positive")
    if velocity_percentile is not None and not 0 < velocity_percentile <= 100:
        raise ValueError("velocity_percentile must lie in (0, 100]")
    bounds = bounds or PitchBounds()
    report = CleaningReport()
    candidates = []
    for pid, group in _group(rows).items():
        report.n_input += 1
        group = sorted(group, key=lambda r: r.time)
        idx = []
        for r in group:
            try:
                idx.append(vocab.index(r.event_type))
            except UnknownEventTypeError as exc:
                raise UnknownEventTypeError(f"line {r.line}: {exc}") from None
        problem = _structural_problem(idx, vocab.E)
        if problem:
            report.dropped[problem] += 1
            continue
        t0 = group[0].time
        times, n_clamped = clamp_times([r.time - t0 for r in group], clamp_dt)
        xy = np.empty((len(group), 2))
        for j, r in enumerate(group):
            xy[j] = bounds.clamp(r.x, r.y)
            report.n_coord_clamps += int((xy[j, 0], xy[j, 1]) != (r.x, r.y))
        report.n_time_clamps += n_clamped
        candidates.append((pid, idx, times, xy))

    keep = [True] * len(candidates)
    if velocity_percentile is not None and candidates:
        speeds = [np.hypot(*np.diff(xy, axis=0).T) / np.diff(times) for _, _, times, xy in candidates]
        threshold = float(np.percentile(np.concatenate(speeds), velocity_percentile, method="inverted_cdf"))
        report.velocity_threshold = threshold
        for i, s in enumerate(speeds):
            if s.max() > threshold:
                keep[i] = False
                report.dropped["velocity"] += 1

    out = []
    for ok, (pid, idx, times, xy) in zip(keep, candidates):
        if not ok:
            continue
        events = tuple(EventRecord(idx[j], times[j], xy[j, 0], xy[j, 1]) for j in range(1, len(idx)))
        out.append(Possession((xy[0, 0], xy[0, 1]), events))
        report.retained_ids.append(pid)
    report.n_retained = len(out)
    return out, report


# -- export ---------------------------------------------------------------------------------

def possessions_to_csv(data: Sequence[Possession], vocab: EventVocabulary, ids: Sequence[str] | None = None) -> str:
    """Event CSV text; floats are written with round-trip precision."""
    ids = ids if ids is not None else [str(i + 1) for i in range(len(data))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for pid, poss in zip(ids, data):
        w.writerow([pid, vocab.start, repr(0.0), repr(poss.origin[0]), repr(poss.origin[1])])
        for ev in poss.events:
            w.writerow([pid, vocab.name(ev.mark), repr(float(ev.time)), repr(float(ev.x)), repr(float(ev.y))])
    return buf.getvalue()


def labels_to_csv(labels, ids: Sequence[str] | None = None) -> str:
    """Sidecar ``possession_id,true_component`` with 1-based components."""
    labels = np.asarray(labels)
    ids = ids if ids is not None else [str(i + 1) for i in range(len(labels))]
    lines = ["possession_id,true_component"]
    lines += [f"{pid},{int(k) + 1}" for pid, k in zip(ids, labels)]
    return "\n".join(lines) + "\n"


def parse_labels(source) -> dict[str, int]:
    """Read a label sidecar; returns 0-based components keyed by possession id."""
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        with open(source, encoding="utf-8", newline="") as fh:
            return parse_labels(fh.read())
    reader = csv.reader(io.StringIO(source))
    header = [h.strip() for h in next(reader, [])]
    if header != ["possession_id", "true_component"]:
        raise EventFileError("line 1: label header must be possession_id,true_component")
    out = {}
    for cells in reader:
        if not cells:
            continue
        if len(cells) != 2:
            raise EventFileError(f"line {reader.line_num}: expected 2 fields")
        try:
            out[cells[0].strip()] = int(cells[1]) - 1
        except ValueError:
            raise EventFileError(f"line {reader.line_num}: component {cells[1]!r} is not an integer") from None
    return out
