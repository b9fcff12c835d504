"""Hierarchical bottleneck localization over per-trace latency series.

Given reduced timelines, an anomaly window on some activity's duration series
is drilled down the parent-child hierarchy: a child is implicated when its
in-window median shift explains a large enough share of the parent's shift.
All implicated children are expanded (root causes may be multivariate);
implicated leaves are the terminal bottleneck candidates.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from tempont.model import Aspect, Kind
from tempont.derivation import Timeline

DEFAULT_K = 5.0
DEFAULT_SHARE = 0.2
MIN_SERIES_POINTS = 30
MIN_WINDOW_POINTS = 5
MERGE_GAP_POINTS = 5
MIN_BASELINE_POINTS = 30


class UnknownPathError(Exception):
    pass


class SeriesTooShortError(Exception):
    pass


@dataclass(frozen=True)
class SeriesPoint:
    t_us: int          # trace begin time
    duration_us: int
    tid: str


@dataclass(frozen=True)
class LatencySeries:
    path: str
    points: tuple[SeriesPoint, ...]  # strictly ordered by trace begin
    omitted: int                     # traces lacking a resolved duration

    def durations(self) -> list[int]:
        return [p.duration_us for p in self.points]

    def to_csv(self) -> str:
        lines = ["t_us,duration_us,tid"]
        lines += [f"{p.t_us},{p.duration_us},{p.tid}" for p in self.points]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AnomalyWindow:
    start_us: int
    end_us: int
    baseline_median: float
    baseline_mad: float
    baseline_points: int
    low_confidence: bool

    def contains(self, t_us: int) -> bool:
        return self.start_us <= t_us <= self.end_us


@dataclass
class BottleneckNode:
    path: str
    verdict: str  # Implicated | Dismissed | Leaf-Implicated
    score: dict
    children: list["BottleneckNode"] = field(default_factory=list)
    note: str | None = None

    def to_json(self) -> dict:
        out = {"path": self.path, "verdict": self.verdict, "score": self.score}
        if self.note:
            out["note"] = self.note
        if self.children:
            out["children"] = [c.to_json() for c in self.children]
        return out

    def implicated_leaves(self) -> list[str]:
        if self.verdict == "Leaf-Implicated":
            return [self.path]
        out: list[str] = []
        for c in self.children:
            out.extend(c.implicated_leaves())
        return out

    def to_text(self, indent: int = 0) -> str:
        pad = "  " * indent
        name = self.path.rsplit("/", 1)[-1]
        shift = self.score.get("shift_us")
        share = self.score.get("share")
        bits = [f"{pad}{name}: {self.verdict}"]
        if shift is not None:
            bits.append(f"shift {shift:+.0f} us")
        if share is not None:
            bits.append(f"share {share:.0%}")
        line = "  ".join(bits)
        if self.note:
            line += f"  [{self.note}]"
        lines = [line]
        for c in self.children:
            lines.append(c.to_text(indent + 1))
        return "\n".join(lines)


def latency_series(timelines: Iterable[Timeline], path: str) -> LatencySeries:
    """Per-trace (trace begin, duration) series for one activity path.

    Trace begin time is the root slot's resolved begin; traces where the
    activity's duration did not resolve are counted as omissions.
    """
    timelines = list(timelines)
    if not timelines:
        raise SeriesTooShortError("no timelines given")
    template = timelines[0].template
    if path not in template.slots:
        raise UnknownPathError(f"unknown activity path {path!r}")
    points: list[SeriesPoint] = []
    omitted = 0
    for tl in timelines:
        t = tl.resolved(template.root, Aspect.BEGIN)
        d = tl.resolved(path, Aspect.DURATION)
        if t is None or d is None:
            omitted += 1
            continue
        points.append(SeriesPoint(t_us=t, duration_us=d, tid=tl.tid))
    points.sort(key=lambda p: (p.t_us, p.tid))
    return LatencySeries(path=path, points=tuple(points), omitted=omitted)


def detect_anomaly(series: LatencySeries, k: float = DEFAULT_K,
                   merge_gap: int = MERGE_GAP_POINTS) -> list[AnomalyWindow]:
    """Find maximal runs of points above median + k * MAD.

    Runs separated by fewer than ``merge_gap`` points merge into one window.
    Baseline statistics for each window are recomputed from the points
    outside every window and flagged low-confidence when sparse.
    """
    if len(series.points) < MIN_SERIES_POINTS:
        raise SeriesTooShortError(
            f"series has {len(series.points)} points; need >= {MIN_SERIES_POINTS}")
    durations = series.durations()
    med = statistics.median(durations)
    mad = statistics.median([abs(d - med) for d in durations])
    threshold = med + k * max(mad, 1.0)

    runs: list[tuple[int, int]] = []
    start = None
    for i, d in enumerate(durations):
        if d > threshold:
            if start is None:
                start = i
        elif start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(durations) - 1))

    merged: list[tuple[int, int]] = []
    for run in runs:
        if merged and run[0] - merged[-1][1] < merge_gap:
            merged[-1] = (merged[-1][0], run[1])
        else:
            merged.append(run)

    inside = set()
    for a, b in merged:
        inside.update(range(a, b + 1))
    outside = [d for i, d in enumerate(durations) if i not in inside]
    if outside:
        base_med = statistics.median(outside)
        base_mad = statistics.median([abs(d - base_med) for d in outside])
    else:
        base_med, base_mad = med, mad
    low = len(outside) < MIN_BASELINE_POINTS
    return [
        AnomalyWindow(
            start_us=series.points[a].t_us, end_us=series.points[b].t_us,
            baseline_median=base_med, baseline_mad=base_mad,
            baseline_points=len(outside), low_confidence=low)
        for a, b in merged
    ]


def _shift(series: LatencySeries, window: AnomalyWindow) -> dict | None:
    inside = [p.duration_us for p in series.points if window.contains(p.t_us)]
    outside = [p.duration_us for p in series.points if not window.contains(p.t_us)]
    if len(inside) < MIN_WINDOW_POINTS:
        return None
    in_med = statistics.median(inside)
    out_med = statistics.median(outside) if outside else in_med
    return {
        "in_window_median_us": in_med,
        "baseline_median_us": out_med,
        "shift_us": in_med - out_med,
        "in_window_points": len(inside),
        "baseline_points": len(outside),
    }


def _pearson(series_a: LatencySeries, series_b: LatencySeries,
             window: AnomalyWindow) -> float | None:
    """In-window trend correlation of child vs parent; reported, never decides."""
    by_tid = {p.tid: p.duration_us for p in series_b.points if window.contains(p.t_us)}
    xs, ys = [], []
    for p in series_a.points:
        if window.contains(p.t_us) and p.tid in by_tid:
            xs.append(p.duration_us)
            ys.append(by_tid[p.tid])
    if len(xs) < 3:
        return None
    mx, my = statistics.fmean(xs), statistics.fmean(ys)
    sx = math.sqrt(sum((x - mx) ** 2 for x in xs))
    sy = math.sqrt(sum((y - my) ** 2 for y in ys))
    if sx == 0 or sy == 0:
        return None
    cov = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    return cov / (sx * sy)


def drill(timelines: Sequence[Timeline], root_path: str,
          window: AnomalyWindow, share_threshold: float = DEFAULT_SHARE,
          epsilon_us: int = 1000) -> BottleneckNode:
    """Recursive bottleneck localization under an anomaly window.

    A child is implicated when its median shift exceeds both the absolute
    epsilon and ``share_threshold`` times the parent's shift. Every implicated
    child is expanded; dismissed children keep their statistics but are not
    expanded. Implicated leaves terminate the descent and need either more
    instrumentation or resource correlation to refine further.
    """
    timelines = list(timelines)
    if not timelines:
        raise SeriesTooShortError("no timelines given")
    template = timelines[0].template
    if root_path not in template.slots:
        raise UnknownPathError(f"unknown activity path {root_path!r}")
    model = template.model

    series_cache: dict[str, LatencySeries] = {}

    def series(path: str) -> LatencySeries:
        if path not in series_cache:
            series_cache[path] = latency_series(timelines, path)
        return series_cache[path]

    root_series = series(root_path)
    root_stats = _shift(root_series, window)
    if root_stats is None:
        raise SeriesTooShortError(
            f"window holds fewer than {MIN_WINDOW_POINTS} points on {root_path!r}")

    def expand(path: str, stats: dict, parent_shift: float | None) -> BottleneckNode:
        slot = template.slots[path]
        kind = model.types[slot.type_name].kind
        is_leaf = not slot.children
        score = dict(stats)
        if parent_shift:
            score["share"] = stats["shift_us"] / parent_shift
        if is_leaf:
            return BottleneckNode(
                path=path, verdict="Leaf-Implicated", score=score,
                note="needs instrumentation or resource correlation")
        node = BottleneckNode(path=path, verdict="Implicated", score=score)

        shift = stats["shift_us"]
        gate = max(epsilon_us, share_threshold * shift)
        child_stats: list[tuple[str, dict | None]] = [
            (c, _shift(series(c), window)) for c in slot.children
        ]
        explained = 0.0
        any_implicated = False
        ordered = list(child_stats)
        if kind == Kind.ALTERNATING:
            # scheduling is unordered by design; rank by duration share
            ordered.sort(key=lambda cs: -(cs[1] or {}).get("in_window_median_us", 0))
        for child, stats_c in ordered:
            if stats_c is None:
                node.children.append(BottleneckNode(
                    path=child, verdict="Dismissed",
                    score={"reason": "insufficient in-window data"}))
                continue
            corr = _pearson(series(child), series(path), window)
            implicated = stats_c["shift_us"] > gate
            if implicated:
                any_implicated = True
                explained += stats_c["shift_us"]
                child_node = expand(child, stats_c, shift)
                if corr is not None:
                    child_node.score["pearson_vs_parent"] = round(corr, 3)
                node.children.append(child_node)
            else:
                score_c = dict(stats_c)
                score_c["share"] = stats_c["shift_us"] / shift if shift else 0.0
                if corr is not None:
                    score_c["pearson_vs_parent"] = round(corr, 3)
                node.children.append(BottleneckNode(
                    path=child, verdict="Dismissed", score=score_c))
        if kind == Kind.SEQUENTIAL:
            node.score["unexplained_us"] = shift - explained
        if not any_implicated:
            node.note = "no child explains the shift (unexplained at this level)"
        return node

    return expand(root_path, root_stats, None)
