"""Synthetic trace generator.

Builds ground-truth timelines that satisfy the model's composition semantics
exactly (integer microseconds, zero-gap meets, shared fork begins, sync-aware
fork ends, alternating children in seeded random order), then emits only the
measured aspects as observation records. Clock skew, record omission, and
shortened ids distort the emitted records, never the ground truth, so every
downstream module can be checked against an exact oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from tempont.model import (
    Aspect,
    ActivityModel,
    InstanceTemplate,
    Kind,
    Relation,
    RelationEdge,
    Sync,
    expand_instance_template,
)
from tempont.traceio import ObservationRecord


class SimConfigError(Exception):
    pass


@dataclass(frozen=True)
class DurationLaw:
    """Sampled per atomic activity; all samples are clamped to >= 1 us."""

    law: str  # constant | uniform | normal | lognormal | exponential
    params: tuple[float, ...]

    @staticmethod
    def from_json(doc) -> "DurationLaw":
        if isinstance(doc, (int, float)):
            return DurationLaw("constant", (float(doc),))
        law = doc.get("law")
        if law == "constant":
            return DurationLaw(law, (float(doc["c"]),))
        if law == "uniform":
            lo, hi = float(doc["lo"]), float(doc["hi"])
            if not 0 < lo <= hi:
                raise SimConfigError(f"uniform law needs 0 < lo <= hi, got {doc}")
            return DurationLaw(law, (lo, hi))
        if law == "normal":
            mu, sigma = float(doc["mu"]), float(doc["sigma"])
            if sigma < 0:
                raise SimConfigError("normal law needs sigma >= 0")
            return DurationLaw(law, (mu, sigma))
        if law == "lognormal":
            return DurationLaw(law, (float(doc["mu"]), float(doc["sigma"])))
        if law == "exponential":
            return DurationLaw(law, (float(doc["mean"]),))
        raise SimConfigError(f"unknown duration law {doc!r}")

    def sample(self, rng: np.random.Generator) -> int:
        if self.law == "constant":
            value = self.params[0]
        elif self.law == "uniform":
            value = rng.uniform(self.params[0], self.params[1])
        elif self.law == "normal":
            value = rng.normal(self.params[0], self.params[1])
        elif self.law == "lognormal":
            value = rng.lognormal(self.params[0], self.params[1])
        else:
            value = rng.exponential(self.params[0])
        return max(1, round(value))

    def to_json(self) -> dict:
        names = {
            "constant": ("c",), "uniform": ("lo", "hi"), "normal": ("mu", "sigma"),
            "lognormal": ("mu", "sigma"), "exponential": ("mean",),
        }[self.law]
        return {"law": self.law, **dict(zip(names, self.params))}


@dataclass(frozen=True)
class SkewSchedule:
    """Per-source clock offset as a function of true time, in microseconds."""

    law: str  # none | constant | sinusoid
    params: tuple[float, ...] = ()

    @staticmethod
    def from_json(doc) -> "SkewSchedule":
        law = doc.get("law", "none")
        if law == "none":
            return SkewSchedule("none")
        if law == "constant":
            return SkewSchedule("constant", (float(doc["offset_us"]),))
        if law == "sinusoid":
            return SkewSchedule("sinusoid", (
                float(doc["amplitude_us"]), float(doc["period_us"]),
                float(doc.get("phase_rad", 0.0))))
        raise SimConfigError(f"unknown skew law {doc!r}")

    def at(self, t_us: int) -> int:
        if self.law == "none":
            return 0
        if self.law == "constant":
            return round(self.params[0])
        amplitude, period, phase = self.params
        return round(amplitude * math.sin(2 * math.pi * t_us / period + phase))

    def to_json(self) -> dict:
        if self.law == "none":
            return {"law": "none"}
        if self.law == "constant":
            return {"law": "constant", "offset_us": self.params[0]}
        return {"law": "sinusoid", "amplitude_us": self.params[0],
                "period_us": self.params[1], "phase_rad": self.params[2]}


@dataclass(frozen=True)
class SpikeInjection:
    """Multiply sampled durations of one activity inside a trace-time window.

    ``settle_us > 0`` lets the excess decay exponentially after the window
    instead of dropping to baseline instantly (queue-like slow settling).
    """

    path: str            # activity path, replica indices ignored
    start_us: int
    end_us: int
    multiplier: float
    settle_us: int = 0

    def factor(self, t_us: int) -> float:
        if t_us < self.start_us:
            return 1.0
        if t_us <= self.end_us:
            return self.multiplier
        if self.settle_us > 0:
            return 1.0 + (self.multiplier - 1.0) * math.exp(
                -(t_us - self.end_us) / self.settle_us)
        return 1.0

    def to_json(self) -> dict:
        return {"path": self.path, "start_us": self.start_us,
                "end_us": self.end_us, "multiplier": self.multiplier,
                "settle_us": self.settle_us}


@dataclass
class SimConfig:
    traces: int = 100
    seed: int = 0
    start_us: int = 0
    interarrival: DurationLaw = DurationLaw("constant", (1_000_000.0,))
    durations: dict[str, DurationLaw] = field(default_factory=dict)
    default_duration: DurationLaw = DurationLaw("uniform", (500.0, 5000.0))
    gap: DurationLaw = DurationLaw("uniform", (1.0, 1000.0))  # before edges
    skews: dict[str, SkewSchedule] = field(default_factory=dict)
    omissions: dict[str, float] = field(default_factory=dict)
    id_length: int = 64
    short_len: int = 8
    short_services: tuple[str, ...] = ()
    forced_prefix_pairs: tuple[tuple[int, int], ...] = ()
    spikes: tuple[SpikeInjection, ...] = ()

    @staticmethod
    def from_json(doc: Mapping) -> "SimConfig":
        cfg = SimConfig()
        cfg.traces = int(doc.get("traces", cfg.traces))
        cfg.seed = int(doc.get("seed", cfg.seed))
        cfg.start_us = int(doc.get("start_us", cfg.start_us))
        if "interarrival" in doc:
            cfg.interarrival = DurationLaw.from_json(doc["interarrival"])
        raw = dict(doc.get("durations", {}))
        if "default" in raw:
            cfg.default_duration = DurationLaw.from_json(raw.pop("default"))
        cfg.durations = {k: DurationLaw.from_json(v) for k, v in raw.items()}
        if "gap" in doc:
            cfg.gap = DurationLaw.from_json(doc["gap"])
        cfg.skews = {k: SkewSchedule.from_json(v)
                     for k, v in doc.get("skews", {}).items()}
        cfg.omissions = {k: float(v) for k, v in doc.get("omissions", {}).items()}
        for src, p in cfg.omissions.items():
            if not 0.0 <= p <= 1.0:
                raise SimConfigError(f"omission probability for {src!r} not in [0,1]")
        cfg.id_length = int(doc.get("id_length", cfg.id_length))
        cfg.short_len = int(doc.get("short_len", cfg.short_len))
        if not 1 <= cfg.short_len < cfg.id_length:
            raise SimConfigError("short_len must be in [1, id_length)")
        cfg.short_services = tuple(doc.get("short_services", ()))
        cfg.forced_prefix_pairs = tuple(
            (int(a), int(b)) for a, b in doc.get("forced_prefix_pairs", ()))
        cfg.spikes = tuple(
            SpikeInjection(
                path=s["path"], start_us=int(s["start_us"]),
                end_us=int(s["end_us"]), multiplier=float(s["multiplier"]),
                settle_us=int(s.get("settle_us", 0)))
            for s in doc.get("spikes", ()))
        return cfg

    @staticmethod
    def load(path: str | Path) -> "SimConfig":
        return SimConfig.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "traces": self.traces,
            "seed": self.seed,
            "start_us": self.start_us,
            "interarrival": self.interarrival.to_json(),
            "durations": {
                "default": self.default_duration.to_json(),
                **{k: v.to_json() for k, v in sorted(self.durations.items())},
            },
            "gap": self.gap.to_json(),
            "skews": {k: v.to_json() for k, v in sorted(self.skews.items())},
            "omissions": dict(sorted(self.omissions.items())),
            "id_length": self.id_length,
            "short_len": self.short_len,
            "short_services": list(self.short_services),
            "forced_prefix_pairs": [list(p) for p in self.forced_prefix_pairs],
            "spikes": [s.to_json() for s in self.spikes],
        }


@dataclass
class TraceTruth:
    tid: str
    arrival_us: int
    slots: dict[str, tuple[int, int, int]]  # path -> (begin, duration, end)


@dataclass
class GroundTruth:
    """Exact per-trace timelines in true time, before any observation effects."""

    template: InstanceTemplate
    traces: dict[str, TraceTruth] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "bindings": dict(self.template.bindings),
            "traces": {
                tid: {
                    "arrival_us": t.arrival_us,
                    "slots": {
                        p: {"begin": v[0], "duration": v[1], "end": v[2]}
                        for p, v in sorted(t.slots.items())
                    },
                }
                for tid, t in sorted(self.traces.items())
            },
        }


def _strip_indices(path: str) -> str:
    out, skip = [], False
    for ch in path:
        if ch == "[":
            skip = True
        elif ch == "]":
            skip = False
        elif not skip:
            out.append(ch)
    return "".join(out)


def _make_tids(cfg: SimConfig, rng: np.random.Generator) -> list[str]:
    tids = [rng.bytes(cfg.id_length // 2).hex()[:cfg.id_length]
            for _ in range(cfg.traces)]
    for a, b in cfg.forced_prefix_pairs:
        if not (0 <= a < cfg.traces and 0 <= b < cfg.traces):
            raise SimConfigError(f"forced_prefix_pairs index out of range: {(a, b)}")
        tids[b] = tids[a][:cfg.short_len] + tids[b][cfg.short_len:]
    # regenerate accidental duplicates of full ids (prefixes may still collide)
    seen: set[str] = set()
    for i, tid in enumerate(tids):
        while tids[i] in seen:
            tids[i] = rng.bytes(cfg.id_length // 2).hex()[:cfg.id_length]
        seen.add(tids[i])
    return tids


def simulate(model: ActivityModel, bindings: Mapping[str, int],
             config: SimConfig) -> tuple[GroundTruth, list[ObservationRecord]]:
    """Generate ground truth plus as-emitted records for one scenario.

    Identical config and seed produce identical output; per-trace generators
    are spawned from the master seed, so results do not depend on how traces
    might be sharded across workers.
    """
    template = expand_instance_template(model, bindings)
    truth = GroundTruth(template=template)
    records: list[ObservationRecord] = []

    master = np.random.SeedSequence(config.seed)
    id_seq, arrival_seq, traces_seq = master.spawn(3)
    id_rng = np.random.default_rng(id_seq)
    arrival_rng = np.random.default_rng(arrival_seq)
    trace_seeds = traces_seq.spawn(config.traces)

    tids = _make_tids(config, id_rng)

    arrival = config.start_us
    for index in range(config.traces):
        arrival += config.interarrival.sample(arrival_rng)
        rng = np.random.default_rng(trace_seeds[index])
        tid = tids[index]
        slots = _build_trace(template, config, rng, arrival)
        truth.traces[tid] = TraceTruth(tid=tid, arrival_us=arrival, slots=slots)
        records.extend(_emit_records(template, config, rng, tid, slots))
    return truth, records


def _build_trace(template: InstanceTemplate, cfg: SimConfig,
                 rng: np.random.Generator, arrival: int) -> dict[str, tuple[int, int, int]]:
    model = template.model
    out: dict[str, tuple[int, int, int]] = {}

    def law_for(path: str) -> DurationLaw:
        bare = _strip_indices(path)
        name = template.slots[path].type_name
        return cfg.durations.get(bare) or cfg.durations.get(name) or cfg.default_duration

    def spike_factor(path: str) -> float:
        bare = _strip_indices(path)
        f = 1.0
        for spike in cfg.spikes:
            if spike.path in (bare, template.slots[path].type_name):
                f *= spike.factor(arrival)
        return f

    def gap_after(a_path: str, b_path: str, parent: str) -> int:
        # zero for meets; sampled positive gap for explicit before edges
        ta = template.slots[a_path].type_name
        tb = template.slots[b_path].type_name
        if RelationEdge(ta, Relation.BEFORE, tb) in model.edges:
            return cfg.gap.sample(rng)
        return 0

    def build(path: str, begin: int) -> tuple[int, int, int]:
        slot = template.slots[path]
        t = model.types[slot.type_name]
        if t.kind in (Kind.ATOMIC, Kind.UNREFINED) or not slot.children:
            d = law_for(path).sample(rng)
            d = max(1, round(d * spike_factor(path)))
            triple = (begin, d, begin + d)
        elif t.kind == Kind.SEQUENTIAL:
            cursor = begin
            prev = None
            for child in slot.children:
                if prev is not None:
                    cursor += gap_after(prev, child, path)
                cb, cd, ce = build(child, cursor)
                cursor = ce
                prev = child
            triple = (begin, cursor - begin, cursor)
        elif t.kind == Kind.FORKED:
            ends = []
            for child in slot.children:
                _, _, ce = build(child, begin)
                ends.append(ce)
            end = max(ends) if t.sync != Sync.WAIT_FOR_ANY else min(ends)
            triple = (begin, end - begin, end)
        else:  # alternating: random order, durations are what matters
            order = [slot.children[i] for i in rng.permutation(len(slot.children))]
            cursor = begin
            for child in order:
                _, _, ce = build(child, cursor)
                cursor = ce
            triple = (begin, cursor - begin, cursor)
        out[path] = triple
        return triple

    build(template.root, arrival)
    return out


def _emit_records(template: InstanceTemplate, cfg: SimConfig,
                  rng: np.random.Generator, tid: str,
                  slots: Mapping[str, tuple[int, int, int]],
                  ) -> list[ObservationRecord]:
    model = template.model
    records: list[ObservationRecord] = []
    sources = sorted({template.source_of(p) or "system" for p in template.slots
                      if model.types[template.slots[p].type_name].measured})
    dropped = {s for s in sources
               if rng.random() < cfg.omissions.get(s, 0.0)}

    for path, slot in template.slots.items():
        t = model.types[slot.type_name]
        if not t.measured:
            continue
        source = template.source_of(path) or "system"
        if source in dropped:
            continue
        skew = cfg.skews.get(source, SkewSchedule("none"))
        b, d, e = slots[path]
        shorten = t.service in cfg.short_services
        for aspect in (Aspect.BEGIN, Aspect.DURATION, Aspect.END):
            if aspect not in t.measured:
                continue
            if aspect == Aspect.BEGIN:
                value = b + skew.at(b)
            elif aspect == Aspect.END:
                value = e + skew.at(e)
            else:
                # a duration is a difference of two local clock reads
                value = d + (skew.at(e) - skew.at(b))
            records.append(ObservationRecord(
                tid=tid[:cfg.short_len] if shorten else tid,
                tid_kind="short" if shorten else "full",
                activity=slot.type_name,
                replica=slot.replica,
                aspect=aspect,
                value_us=int(value),
                source=source,
                captured_us=e + skew.at(e),
            ))
    return records


def records_to_jsonl(records: Sequence[ObservationRecord]) -> str:
    return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)
