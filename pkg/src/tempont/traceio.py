"""Observation record intake: ingest, correlate into per-trace bundles, and
check completeness against the model's declared sensors.

Records arrive as JSONL or CSV rows in one canonical schema; malformed rows
are collected, never silently dropped. Correlation anchors bundles on full
trace ids and attaches shortened-id records by prefix, quarantining any
ambiguous prefix instead of guessing. An explicit opt-in pass may resolve
quarantined records by temporal proximity.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from tempont.model import Aspect, ActivityModel, InstanceTemplate

RECORD_FIELDS = ("tid", "tid_kind", "activity", "replica", "aspect",
                 "value_us", "source", "captured_us")

DEFAULT_PREFIX_LEN = 8
DEFAULT_PROXIMITY_WINDOW_US = 60_000_000  # +/- 60 s


class IngestError(Exception):
    pass


@dataclass(frozen=True)
class ObservationRecord:
    """One measured temporal datum from one source component."""

    tid: str
    tid_kind: str  # "full" | "short"
    activity: str
    replica: str | None
    aspect: Aspect
    value_us: int
    source: str
    captured_us: int

    def to_json(self) -> dict:
        return {
            "tid": self.tid,
            "tid_kind": self.tid_kind,
            "activity": self.activity,
            "replica": self.replica,
            "aspect": self.aspect.value,
            "value_us": self.value_us,
            "source": self.source,
            "captured_us": self.captured_us,
        }


@dataclass(frozen=True)
class RejectedLine:
    line: int
    reason: str
    raw: str


@dataclass
class TraceBundle:
    """All records correlated to one canonical (full) trace id."""

    tid: str
    records: list[ObservationRecord] = field(default_factory=list)
    recovered: list[ObservationRecord] = field(default_factory=list)
    ambiguity: str | None = None

    def all_records(self) -> list[ObservationRecord]:
        return self.records + self.recovered

    def span(self) -> tuple[int, int] | None:
        times = [r.captured_us for r in self.all_records()]
        return (min(times), max(times)) if times else None


@dataclass(frozen=True)
class CollisionEntry:
    record: ObservationRecord
    candidates: tuple[str, ...]   # full ids sharing the record's prefix
    resolved_to: str | None = None


@dataclass
class CollisionReport:
    collisions: list[CollisionEntry] = field(default_factory=list)
    unmatched: list[ObservationRecord] = field(default_factory=list)

    @property
    def recovered(self) -> list[CollisionEntry]:
        return [c for c in self.collisions if c.resolved_to is not None]


def _record_from_mapping(row: Mapping, line: int) -> ObservationRecord:
    missing = [k for k in RECORD_FIELDS if k not in row]
    if missing:
        raise IngestError(f"missing fields {missing}")
    aspect_raw = row["aspect"]
    try:
        aspect = Aspect(aspect_raw)
    except ValueError:
        raise IngestError(f"unknown aspect {aspect_raw!r}") from None
    tid_kind = row["tid_kind"]
    if tid_kind not in ("full", "short"):
        raise IngestError(f"tid_kind must be full or short, got {tid_kind!r}")
    tid = row["tid"]
    if not isinstance(tid, str) or not tid:
        raise IngestError("tid must be a non-empty string")
    try:
        value_us = int(row["value_us"])
        captured_us = int(row["captured_us"])
    except (TypeError, ValueError):
        raise IngestError("value_us and captured_us must be integers") from None
    if aspect == Aspect.DURATION and value_us < 0:
        raise IngestError("negative duration")
    replica = row["replica"]
    if replica in ("", None, "null"):
        replica = None
    return ObservationRecord(
        tid=tid, tid_kind=tid_kind, activity=row["activity"], replica=replica,
        aspect=aspect, value_us=value_us, source=row["source"],
        captured_us=captured_us)


def ingest(stream: Iterable[str] | str | io.TextIOBase, format: str = "jsonl",
           ) -> tuple[list[ObservationRecord], list[RejectedLine]]:
    """Decode a record stream; returns (records, rejects).

    ``stream`` may be an open text file, a string, or any line iterable.
    Unknown format tags raise; malformed lines land in the rejects list with
    their line number and reason.
    """
    if format not in ("jsonl", "csv"):
        raise IngestError(f"unknown format {format!r} (expected jsonl or csv)")
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    records: list[ObservationRecord] = []
    rejects: list[RejectedLine] = []
    if format == "jsonl":
        for line_no, line in enumerate(stream, start=1):
            raw = line.strip()
            if not raw:
                continue
            try:
                row = json.loads(raw)
                records.append(_record_from_mapping(row, line_no))
            except (json.JSONDecodeError, IngestError) as exc:
                rejects.append(RejectedLine(line_no, str(exc), raw[:200]))
    else:
        reader = csv.DictReader(stream)
        if reader.fieldnames is None:
            raise IngestError("csv stream is empty (header row required)")
        header = [f for f in RECORD_FIELDS if f not in reader.fieldnames]
        if header:
            raise IngestError(f"csv header missing columns {header}")
        for line_no, row in enumerate(reader, start=2):
            try:
                records.append(_record_from_mapping(row, line_no))
            except IngestError as exc:
                rejects.append(RejectedLine(line_no, str(exc), json.dumps(row)[:200]))
    return records, rejects


def correlate(records: Sequence[ObservationRecord],
              prefix_len: int = DEFAULT_PREFIX_LEN,
              recover: bool = False,
              proximity_window_us: int = DEFAULT_PROXIMITY_WINDOW_US,
              ) -> tuple[dict[str, TraceBundle], CollisionReport]:
    """Group records into per-trace bundles keyed by full trace id.

    Full-id records anchor bundles. A shortened-id record attaches to the
    unique bundle whose id carries that prefix; with two or more candidates it
    is quarantined with all candidate ids listed. The optional recovery pass
    assigns a quarantined record iff exactly one candidate bundle has records
    within the proximity window of its capture time, and marks it recovered.
    """
    bundles: dict[str, TraceBundle] = {}
    shorts: list[ObservationRecord] = []
    report = CollisionReport()

    for rec in records:
        if rec.tid_kind == "full":
            bundles.setdefault(rec.tid, TraceBundle(tid=rec.tid)).records.append(rec)
        else:
            shorts.append(rec)

    by_prefix: dict[str, list[str]] = {}
    for tid in bundles:
        by_prefix.setdefault(tid[:prefix_len], []).append(tid)

    for rec in shorts:
        candidates = sorted(by_prefix.get(rec.tid, []))
        if len(rec.tid) != prefix_len:
            # prefix of unexpected length still matches by startswith
            candidates = sorted(t for t in bundles if t.startswith(rec.tid))
        if len(candidates) == 1:
            bundles[candidates[0]].records.append(rec)
        elif not candidates:
            report.unmatched.append(rec)
        else:
            entry = CollisionEntry(rec, tuple(candidates))
            if recover:
                near = [
                    tid for tid in candidates
                    if _within(bundles[tid], rec.captured_us, proximity_window_us)
                ]
                if len(near) == 1:
                    entry = CollisionEntry(rec, tuple(candidates), resolved_to=near[0])
                    bundles[near[0]].recovered.append(rec)
            report.collisions.append(entry)
            for tid in candidates:
                bundles[tid].ambiguity = (
                    f"shortened id {rec.tid!r} matches {len(candidates)} bundles")
    return bundles, report


def _within(bundle: TraceBundle, t: int, window: int) -> bool:
    return any(abs(r.captured_us - t) <= window for r in bundle.records)


@dataclass(frozen=True)
class ExpectedTriple:
    path: str
    aspect: Aspect
    source: str | None


@dataclass
class TraceCompleteness:
    tid: str
    missing: list[ExpectedTriple] = field(default_factory=list)
    surplus: list[ObservationRecord] = field(default_factory=list)


@dataclass
class CompletenessReport:
    """Per-trace missing/surplus against the model's declared sensors."""

    traces: dict[str, TraceCompleteness] = field(default_factory=dict)
    expected_per_trace: int = 0
    expected_by_source: dict[str | None, int] = field(default_factory=dict)

    @property
    def incomplete_traces(self) -> list[str]:
        return sorted(t for t, c in self.traces.items() if c.missing)

    def missing_by_source(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.traces.values():
            for m in c.missing:
                out[m.source or "?"] = out.get(m.source or "?", 0) + 1
        return out

    def traces_missing_all_from(self) -> dict[str, int]:
        """Count traces that lost every expected record of a source."""
        out: dict[str, int] = {}
        for c in self.traces.values():
            lost: dict[str | None, int] = {}
            for m in c.missing:
                lost[m.source] = lost.get(m.source, 0) + 1
            for source, n in lost.items():
                if n == self.expected_by_source.get(source, -1):
                    out[source or "?"] = out.get(source or "?", 0) + 1
        return out

    def to_json(self) -> dict:
        return {
            "expected_per_trace": self.expected_per_trace,
            "traces": {
                tid: {
                    "missing": [
                        {"path": m.path, "aspect": m.aspect.value, "source": m.source}
                        for m in c.missing
                    ],
                    "surplus": [r.to_json() for r in c.surplus],
                }
                for tid, c in sorted(self.traces.items())
                if c.missing or c.surplus
            },
            "aggregate": {
                "incomplete_traces": len(self.incomplete_traces),
                "missing_by_source": self.missing_by_source(),
                "traces_missing_all_from": self.traces_missing_all_from(),
            },
        }


def completeness_check(bundles: Mapping[str, TraceBundle],
                       model: ActivityModel,
                       template: InstanceTemplate) -> CompletenessReport:
    """Compare each bundle against the expected (slot, aspect, source) set.

    Expected records are every measured aspect of every slot, attributed to
    the slot's declared service instance. Each expected triple consumes at
    most one record; duplicates and records matching nothing are surplus.
    """
    expected: list[ExpectedTriple] = []
    slot_index: dict[tuple[str, str | None], list[str]] = {}
    for path, slot in template.slots.items():
        t = model.types[slot.type_name]
        slot_index.setdefault((slot.type_name, slot.replica), []).append(path)
        for aspect in t.measured:
            expected.append(ExpectedTriple(path, aspect, template.source_of(path)))

    by_source: dict[str | None, int] = {}
    for e in expected:
        by_source[e.source] = by_source.get(e.source, 0) + 1
    report = CompletenessReport(expected_per_trace=len(expected),
                                expected_by_source=by_source)
    for tid, bundle in bundles.items():
        comp = TraceCompleteness(tid=tid)
        remaining: dict[tuple[str, Aspect, str | None], int] = {}
        for e in expected:
            remaining[(e.path, e.aspect, e.source)] = remaining.get(
                (e.path, e.aspect, e.source), 0) + 1
        for rec in bundle.all_records():
            paths = (slot_index.get((rec.activity, rec.replica))
                     or (slot_index.get((rec.activity, None))
                         if rec.replica is None else None))
            if rec.replica is None and not paths:
                # records without a discriminator may match a replicated slot
                # only if the activity expands to exactly one slot overall
                all_paths = [p for (a, _), ps in slot_index.items()
                             if a == rec.activity for p in ps]
                paths = all_paths if len(all_paths) == 1 else None
            key = None
            if paths and len(paths) == 1:
                key = (paths[0], rec.aspect, rec.source)
            if key is not None and remaining.get(key, 0) > 0:
                remaining[key] -= 1
            else:
                comp.surplus.append(rec)
        for e in expected:
            if remaining.get((e.path, e.aspect, e.source), 0) > 0:
                comp.missing.append(e)
                remaining[(e.path, e.aspect, e.source)] -= 1
        report.traces[tid] = comp
    return report
