"""Conformance and consistency checks over propagated timelines.

Three families: (a) the begin+duration=end identity wherever all three
aspects resolve, (b) every modeled interval relation evaluated on resolved
values, (c) agreement between the multiple derivation paths of one slot
aspect. Disagreements become findings with signed magnitudes and feed a
per-pair mismatch distribution; nothing here mutates or repairs the data.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from tempont.model import ActivityModel, Aspect, InstanceTemplate, Sync
from tempont.derivation import Timeline, template_edges

DEFAULT_EPSILON_US = 1000
ERROR_RATIO = 10  # findings at >= ERROR_RATIO * epsilon warrant investigation


@dataclass(frozen=True)
class Finding:
    kind: str          # IdentityViolation | RelationViolation | MultiPathMismatch
                       # | NegativeDuration | CausalityViolation
                       # | ClockDriftEstimate | ZeroDurationWarning
    tid: str
    path: str
    magnitude_us: int  # signed discrepancy
    detail: str
    severity: str = "warning"   # "warning" | "error"
    sources: tuple[str, ...] = ()

    def to_json(self) -> dict:
        out = {
            "kind": self.kind,
            "tid": self.tid,
            "path": self.path,
            "magnitude_us": self.magnitude_us,
            "detail": self.detail,
            "severity": self.severity,
        }
        if self.sources:
            out["sources"] = list(self.sources)
        return out


def _severity(magnitude: int, eps: int) -> str:
    return "error" if abs(magnitude) >= ERROR_RATIO * max(eps, 1) else "warning"


PairKey = tuple[str, Aspect, str, str]  # (activity type, aspect, label_a, label_b)


@dataclass
class MismatchDistribution:
    """Signed path-pair discrepancies per (activity type, aspect, pair)."""

    magnitudes: dict[PairKey, list[int]] = field(default_factory=dict)
    traces_seen: int = 0

    def record(self, key: PairKey, magnitude: int) -> None:
        self.magnitudes.setdefault(key, []).append(magnitude)

    def pairs(self) -> list[PairKey]:
        return sorted(self.magnitudes)

    def share_of_traces(self, key: PairKey) -> float:
        if not self.traces_seen:
            return 0.0
        return len(self.magnitudes.get(key, ())) / self.traces_seen

    def histogram(self, key: PairKey, bucket_us: int = 100) -> dict[int, int]:
        out: dict[int, int] = {}
        for m in self.magnitudes.get(key, ()):
            bucket = (m // bucket_us) * bucket_us
            out[bucket] = out.get(bucket, 0) + 1
        return dict(sorted(out.items()))

    def to_csv(self, bucket_us: int = 100) -> str:
        lines = ["activity,aspect,path_a,path_b,bucket_us,count"]
        for key in self.pairs():
            activity, aspect, pa, pb = key
            for bucket, count in self.histogram(key, bucket_us).items():
                lines.append(f"{activity},{aspect.value},{pa},{pb},{bucket},{count}")
        return "\n".join(lines) + "\n"

    def merge(self, other: "MismatchDistribution") -> None:
        for key, values in other.magnitudes.items():
            self.magnitudes.setdefault(key, []).extend(values)
        self.traces_seen += other.traces_seen


@dataclass
class ConformanceReport:
    findings: list[Finding]
    distribution: MismatchDistribution
    checks_performed: int = 0

    def __iter__(self):  # allow (findings, distribution) unpacking
        yield self.findings
        yield self.distribution


def expected_check_count(template: InstanceTemplate,
                         timelines: Sequence[Timeline]) -> int:
    """Checks a conformance run must perform: one per modeled relation with
    resolved operands plus one identity per fully resolved slot plus one per
    multi-derivation slot aspect."""
    total = 0
    edges = template_edges(template)
    for tl in timelines:
        for path in template.slots:
            b, d, e = tl.resolved_triple(path)
            if None not in (b, d, e):
                total += 1
        for edge in edges:
            if edge.kind in ("meets", "before"):
                a, b_ = edge.args
                if (tl.resolved(a, Aspect.END) is not None
                        and tl.resolved(b_, Aspect.BEGIN) is not None):
                    total += 1
            elif edge.kind in ("starts", "finishes"):
                aspect = Aspect.BEGIN if edge.kind == "starts" else Aspect.END
                c, p = edge.args
                if (tl.resolved(c, aspect) is not None
                        and tl.resolved(p, aspect) is not None):
                    total += 1
            elif edge.kind == "fork":
                p, kids, _sync = edge.args
                pb = tl.resolved(p, Aspect.BEGIN)
                total += sum(
                    1 for k in kids
                    if pb is not None and tl.resolved(k, Aspect.BEGIN) is not None)
                if (tl.resolved(p, Aspect.END) is not None and all(
                        tl.resolved(k, Aspect.END) is not None for k in kids)):
                    total += 1
            elif edge.kind == "alt":
                p, kids = edge.args
                if (tl.resolved(p, Aspect.DURATION) is not None and all(
                        tl.resolved(k, Aspect.DURATION) is not None for k in kids)):
                    total += 1
        for (path, aspect), ds in tl.slots.items():
            if len(ds) > 1:
                total += 1
    return total


def check_conformance(timelines: Iterable[Timeline], model: ActivityModel,
                      epsilon_us: int = DEFAULT_EPSILON_US) -> ConformanceReport:
    """Check identity, modeled relations, and multi-path agreement per trace.

    Runs on unreduced timelines. Every violation beyond epsilon becomes a
    finding; every resolved path pair contributes its signed spread to the
    distribution whether or not it violates.
    """
    findings: list[Finding] = []
    dist = MismatchDistribution()
    checks = 0
    timelines = list(timelines)
    dist.traces_seen = len(timelines)

    for tl in timelines:
        template = tl.template
        type_of = {p: s.type_name for p, s in template.slots.items()}
        edges = template_edges(template)

        for path in template.slots:
            b, d, e = tl.resolved_triple(path)
            if None in (b, d, e):
                continue
            checks += 1
            gap = b + d - e
            if abs(gap) > epsilon_us:
                findings.append(Finding(
                    kind="IdentityViolation", tid=tl.tid, path=path,
                    magnitude_us=gap, severity=_severity(gap, epsilon_us),
                    detail=f"begin+duration-end = {gap} us",
                    sources=_sources_at(tl, path)))
            if d == 0:
                findings.append(Finding(
                    kind="ZeroDurationWarning", tid=tl.tid, path=path,
                    magnitude_us=0, severity="warning",
                    detail="zero-length duration accepted from coarse sensor"))

        for edge in edges:
            checks += _check_edge(tl, edge, epsilon_us, findings)

        for (path, aspect), ds in sorted(tl.slots.items()):
            if len(ds) < 2:
                continue
            checks += 1
            ordered = sorted(ds, key=lambda dd: dd.label)
            base = ordered[0]
            for other in ordered[1:]:
                magnitude = other.value - base.value
                key = (type_of[path], aspect, base.label, other.label)
                dist.record(key, magnitude)
                if abs(magnitude) > epsilon_us:
                    findings.append(Finding(
                        kind="MultiPathMismatch", tid=tl.tid, path=path,
                        magnitude_us=magnitude,
                        severity=_severity(magnitude, epsilon_us),
                        detail=(f"{aspect.value} differs between paths "
                                f"{base.label} and {other.label}"),
                        sources=tuple(sorted(base.sources | other.sources))))
    return ConformanceReport(findings, dist, checks)


def _sources_at(tl: Timeline, path: str) -> tuple[str, ...]:
    out: set[str] = set()
    for aspect in Aspect:
        for d in tl.derivations(path, aspect):
            out |= d.sources
    return tuple(sorted(out))


def _check_edge(tl: Timeline, edge, eps: int, findings: list[Finding]) -> int:
    checks = 0
    if edge.kind in ("meets", "before"):
        a, b = edge.args
        pred_end = tl.resolved(a, Aspect.END)
        succ_begin = tl.resolved(b, Aspect.BEGIN)
        if pred_end is None or succ_begin is None:
            return 0
        checks += 1
        gap = succ_begin - pred_end
        bad = abs(gap) > eps if edge.kind == "meets" else gap < -eps
        if bad:
            findings.append(Finding(
                kind="RelationViolation", tid=tl.tid, path=b,
                magnitude_us=gap, severity=_severity(gap, eps),
                detail=f"{edge.kind}: successor begins {gap} us after predecessor end",
                sources=tuple(sorted(
                    _value_sources(tl, a, Aspect.END, pred_end)
                    | _value_sources(tl, b, Aspect.BEGIN, succ_begin)))))
    elif edge.kind in ("starts", "finishes"):
        child, parent = edge.args
        aspect = Aspect.BEGIN if edge.kind == "starts" else Aspect.END
        cv, pv = tl.resolved(child, aspect), tl.resolved(parent, aspect)
        if cv is None or pv is None:
            return 0
        checks += 1
        gap = cv - pv
        if abs(gap) > eps:
            findings.append(Finding(
                kind="RelationViolation", tid=tl.tid, path=child,
                magnitude_us=gap, severity=_severity(gap, eps),
                detail=f"{edge.kind}: child {aspect.value} differs from parent by {gap} us"))
    elif edge.kind == "fork":
        parent, kids, sync = edge.args
        pb = tl.resolved(parent, Aspect.BEGIN)
        for k in kids:
            kb = tl.resolved(k, Aspect.BEGIN)
            if pb is None or kb is None:
                continue
            checks += 1
            gap = kb - pb
            if abs(gap) > eps:
                findings.append(Finding(
                    kind="RelationViolation", tid=tl.tid, path=k,
                    magnitude_us=gap, severity=_severity(gap, eps),
                    detail=f"fork child begins {gap} us after forked parent"))
        pe = tl.resolved(parent, Aspect.END)
        kid_ends = [tl.resolved(k, Aspect.END) for k in kids]
        if pe is not None and all(v is not None for v in kid_ends):
            checks += 1
            agg = min(kid_ends) if sync == Sync.WAIT_FOR_ANY else max(kid_ends)
            gap = pe - agg
            if abs(gap) > eps:
                word = "fastest" if sync == Sync.WAIT_FOR_ANY else "slowest"
                findings.append(Finding(
                    kind="RelationViolation", tid=tl.tid, path=parent,
                    magnitude_us=gap, severity=_severity(gap, eps),
                    detail=f"forked parent end differs from {word} child end by {gap} us"))
    elif edge.kind == "alt":
        parent, kids = edge.args
        pd = tl.resolved(parent, Aspect.DURATION)
        kid_durations = [tl.resolved(k, Aspect.DURATION) for k in kids]
        if pd is not None and all(v is not None for v in kid_durations):
            checks += 1
            gap = sum(kid_durations) - pd
            if abs(gap) > eps:
                findings.append(Finding(
                    kind="RelationViolation", tid=tl.tid, path=parent,
                    magnitude_us=gap, severity=_severity(gap, eps),
                    detail=f"alternating children durations sum {gap} us over parent"))
    return checks


def _value_sources(tl: Timeline, path: str, aspect: Aspect, value: int) -> set[str]:
    out: set[str] = set()
    for d in tl.derivations(path, aspect):
        if d.value == value:
            out |= d.sources
    return out


# --------------------------------------------------------------------------
# Causality

def check_causality(timelines: Iterable[Timeline],
                    epsilon_us: int = 0) -> list[Finding]:
    """Negative durations and successor-before-predecessor orderings.

    Both are measurement-implied event causality violations, typically caused
    by clock skew between the source components; findings name the components
    whose measurements produced the inconsistency.
    """
    findings: list[Finding] = []
    for tl in timelines:
        template = tl.template
        for path in template.slots:
            d = tl.resolved(path, Aspect.DURATION)
            if d is not None and d < 0:
                findings.append(Finding(
                    kind="NegativeDuration", tid=tl.tid, path=path,
                    magnitude_us=d, severity="error",
                    detail=f"derived duration {d} us implies effect before cause",
                    sources=tuple(sorted(_value_sources(
                        tl, path, Aspect.DURATION, d)))))
        for edge in template_edges(template):
            if edge.kind not in ("meets", "before"):
                continue
            a, b = edge.args
            pred_end = tl.resolved(a, Aspect.END)
            succ_begin = tl.resolved(b, Aspect.BEGIN)
            if pred_end is None or succ_begin is None:
                continue
            gap = succ_begin - pred_end
            if gap < -epsilon_us:
                findings.append(Finding(
                    kind="CausalityViolation", tid=tl.tid, path=b,
                    magnitude_us=gap, severity="error",
                    detail=(f"successor begins {-gap} us before its "
                            f"predecessor ends"),
                    sources=tuple(sorted(
                        _value_sources(tl, a, Aspect.END, pred_end)
                        | _value_sources(tl, b, Aspect.BEGIN, succ_begin)))))
    return findings


# --------------------------------------------------------------------------
# Clock drift estimation

@dataclass(frozen=True)
class DriftPoint:
    window_mid_us: int
    mean_gap_us: float
    count: int


def estimate_drift(timelines: Iterable[Timeline], window_us: int,
                   ) -> dict[tuple[str, str], list[DriftPoint]]:
    """Windowed mean of signed cross-component gaps per ordered source pair.

    A sample is any duration derived by the two-point rule whose begin input
    and end input were measured by different single sources; the derived
    value then carries the clock offset between the two, plus the activity's
    real duration. Oscillation shows up in the series directly; no waveform
    fitting is attempted.
    """
    samples: dict[tuple[str, str], list[tuple[int, int]]] = {}
    for tl in timelines:
        for (path, aspect), ds in tl.slots.items():
            if aspect != Aspect.DURATION:
                continue
            for d in ds:
                if d.prov.kind != "rule" or d.prov.label != "R2":
                    continue
                begin_in = next(
                    (i for i in d.prov.inputs if i.aspect == Aspect.BEGIN), None)
                end_in = next(
                    (i for i in d.prov.inputs if i.aspect == Aspect.END), None)
                if begin_in is None or end_in is None:
                    continue
                if len(begin_in.sources) != 1 or len(end_in.sources) != 1:
                    continue
                (src_b,), (src_e,) = begin_in.sources, end_in.sources
                if src_b == src_e:
                    continue
                samples.setdefault((src_b, src_e), []).append(
                    (begin_in.value, d.value))

    out: dict[tuple[str, str], list[DriftPoint]] = {}
    for pair, points in samples.items():
        points.sort()
        t0, t1 = points[0][0], points[-1][0]
        if window_us > max(t1 - t0, 1):
            raise ValueError(
                f"window of {window_us} us exceeds the data span "
                f"{t1 - t0} us for pair {pair}")
        buckets: dict[int, list[int]] = {}
        for t, gap in points:
            buckets.setdefault((t - t0) // window_us, []).append(gap)
        out[pair] = [
            DriftPoint(
                window_mid_us=int(t0 + (k + 0.5) * window_us),
                mean_gap_us=statistics.fmean(gaps),
                count=len(gaps))
            for k, gaps in sorted(buckets.items())
        ]
    return out


def drift_findings(series: Mapping[tuple[str, str], Sequence[DriftPoint]],
                   epsilon_us: int = DEFAULT_EPSILON_US) -> list[Finding]:
    """Summarize each source-pair series as one ClockDriftEstimate finding."""
    findings = []
    for (src_a, src_b), points in sorted(series.items()):
        peak = max(points, key=lambda p: abs(p.mean_gap_us))
        mean = statistics.fmean(p.mean_gap_us for p in points)
        findings.append(Finding(
            kind="ClockDriftEstimate", tid="*",
            path=f"{src_a}->{src_b}",
            magnitude_us=round(peak.mean_gap_us),
            severity=_severity(round(peak.mean_gap_us), epsilon_us),
            detail=(f"windowed gap mean {mean:.0f} us, peak "
                    f"{peak.mean_gap_us:.0f} us at t={peak.window_mid_us}"),
            sources=(src_a, src_b)))
    return findings


def drift_series_to_csv(series: Mapping[tuple[str, str], Sequence[DriftPoint]]) -> str:
    lines = ["source_a,source_b,window_mid_us,mean_gap_us,count"]
    for (a, b), points in sorted(series.items()):
        for p in points:
            lines.append(f"{a},{b},{p.window_mid_us},{p.mean_gap_us:.3f},{p.count}")
    return "\n".join(lines) + "\n"
