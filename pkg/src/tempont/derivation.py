"""Per-trace value propagation along the derivation rules.

Measured records are bound to template slots, then the instance-level rule
set (same catalog as class saturation, now with value semantics) is applied
to a fixpoint. Every distinct derivation path contributes its own valued
derivation; disagreeing paths are retained as data for validation, never
collapsed here. Gapped (before/after) relations yield bounds, not values.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Iterable

from tempont.model import (
    Aspect,
    InstanceTemplate,
    Kind,
    Relation,
    Slot,
    Sync,
    expand_instance_template,
)
from tempont.traceio import ObservationRecord, TraceBundle

Key = tuple[str, Aspect]  # (slot path, aspect)

MAX_FIXPOINT_STEPS = 10_000


class BindingError(Exception):
    pass


class AmbiguousBindingError(BindingError):
    pass


class PropagationLimitError(Exception):
    pass


class ReplicaRankError(Exception):
    pass


@dataclass(frozen=True)
class InputRef:
    path: str
    aspect: Aspect
    value: int
    sources: frozenset[str]


@dataclass(frozen=True)
class Prov:
    """Where a value came from: a sensor or one rule application."""

    kind: str                        # "measured" | "rule"
    label: str                       # source name or rule id
    inputs: tuple[InputRef, ...] = ()

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind, "label": self.label}
        if self.inputs:
            out["inputs"] = [
                {"path": i.path, "aspect": i.aspect.value, "value_us": i.value}
                for i in self.inputs
            ]
        return out


@dataclass(frozen=True)
class ValuedDerivation:
    value: int
    prov: Prov
    sources: frozenset[str]
    # every slot-aspect this value transitively derives from; a rule must not
    # re-derive a key from values that already depend on it (circular paths
    # are not derivation paths, and unchecked they generate value ladders on
    # inconsistent data)
    ancestry: frozenset[Key] = frozenset()

    @property
    def label(self) -> str:
        return (f"measured:{self.prov.label}" if self.prov.kind == "measured"
                else self.prov.label)


@dataclass(frozen=True)
class Bound:
    key: Key
    op: str      # "ge" | "le"
    value: int
    rule: str


@dataclass
class Timeline:
    """Per-trace instance tree with valued, provenance-carrying slots."""

    template: InstanceTemplate
    tid: str
    slots: dict[Key, list[ValuedDerivation]] = field(default_factory=dict)
    bounds: list[Bound] = field(default_factory=list)
    unbound: list[tuple[ObservationRecord, str]] = field(default_factory=list)
    kept_replicas: dict[str, str] = field(default_factory=dict)

    def derivations(self, path: str, aspect: Aspect) -> list[ValuedDerivation]:
        return self.slots.get((path, aspect), [])

    def resolved(self, path: str, aspect: Aspect) -> int | None:
        """Measured value if present, else the median of derived values."""
        ds = self.slots.get((path, aspect))
        if not ds:
            return None
        measured = sorted(d.value for d in ds if d.prov.kind == "measured")
        if measured:
            return statistics.median_low(measured)
        return statistics.median_low(sorted(d.value for d in ds))

    def resolved_triple(self, path: str) -> tuple[int | None, int | None, int | None]:
        return (self.resolved(path, Aspect.BEGIN),
                self.resolved(path, Aspect.DURATION),
                self.resolved(path, Aspect.END))

    def add(self, key: Key, value: int, prov: Prov, sources: frozenset[str],
            ancestry: frozenset[Key] = frozenset()) -> bool:
        """Install a derivation unless the value is already present.

        At equal values the derivation with the smaller ancestry wins (it
        blocks fewer downstream paths); remaining ties keep the smallest
        provenance label so results are order independent.
        """
        ds = self.slots.setdefault(key, [])
        for i, d in enumerate(ds):
            if d.value == value:
                cand = ValuedDerivation(value, prov, sources, ancestry)
                if (ancestry < d.ancestry
                        or (not d.ancestry < ancestry
                            and _prov_order(cand) < _prov_order(d))):
                    # a strictly better duplicate may unblock consumers that
                    # the wider ancestry held back, so report it as a change
                    ds[i] = cand
                    return ancestry < d.ancestry
                return False
        ds.append(ValuedDerivation(value, prov, sources, ancestry))
        return True

    def to_json(self) -> dict:
        slots: dict[str, dict] = {}
        for (path, aspect), ds in self.slots.items():
            slots.setdefault(path, {})[aspect.value] = [
                {
                    "value_us": d.value,
                    "prov": d.label,
                    "sources": sorted(d.sources),
                    **({"inputs": [
                        {"path": i.path, "aspect": i.aspect.value,
                         "value_us": i.value, "sources": sorted(i.sources)}
                        for i in d.prov.inputs
                    ]} if d.prov.inputs else {}),
                }
                for d in sorted(ds, key=_prov_order)
            ]
        out = {
            "tid": self.tid,
            "slots": {p: slots[p] for p in sorted(slots)},
        }
        if self.bounds:
            out["bounds"] = [
                {"path": b.key[0], "aspect": b.key[1].value, "op": b.op,
                 "value_us": b.value, "rule": b.rule}
                for b in self.bounds
            ]
        if self.unbound:
            out["unbound"] = [
                {"record": r.to_json(), "reason": why} for r, why in self.unbound
            ]
        if self.kept_replicas:
            out["kept_replicas"] = dict(sorted(self.kept_replicas.items()))
        return out


def _prov_order(d: ValuedDerivation) -> tuple:
    # measured provenance always outranks rule provenance at equal values
    return (0 if d.prov.kind == "measured" else 1, d.label,
            tuple((i.path, i.aspect.value) for i in d.prov.inputs), d.value)


def timeline_from_json(doc: dict, template: InstanceTemplate) -> Timeline:
    """Rebuild a timeline from its JSON form against a matching template."""
    tl = Timeline(template=template, tid=doc["tid"])
    for path, aspects in doc.get("slots", {}).items():
        for aspect_name, ds in aspects.items():
            aspect = Aspect(aspect_name)
            for d in ds:
                label = d["prov"]
                if label.startswith("measured:"):
                    prov = Prov(kind="measured", label=label.split(":", 1)[1])
                else:
                    prov = Prov(kind="rule", label=label, inputs=tuple(
                        InputRef(i["path"], Aspect(i["aspect"]), i["value_us"],
                                 frozenset(i.get("sources", ())))
                        for i in d.get("inputs", ())))
                tl.slots.setdefault((path, aspect), []).append(
                    ValuedDerivation(d["value_us"], prov,
                                     frozenset(d.get("sources", ()))))
    for b in doc.get("bounds", ()):
        tl.bounds.append(Bound((b["path"], Aspect(b["aspect"])), b["op"],
                               b["value_us"], b["rule"]))
    tl.kept_replicas = dict(doc.get("kept_replicas", {}))
    return tl


# --------------------------------------------------------------------------
# Record binding

def instantiate(bundle: TraceBundle, template: InstanceTemplate,
                ) -> Timeline:
    """Bind a bundle's records into measured derivations on template slots.

    A record resolves through (activity type, replica discriminator); a bare
    hint matching several replicas is an ambiguous-binding error, while a
    hint matching nothing is reported on the timeline, not raised.
    """
    by_hint: dict[tuple[str, str | None], list[str]] = {}
    count_by_type: dict[str, list[str]] = {}
    for path, slot in template.slots.items():
        by_hint.setdefault((slot.type_name, slot.replica), []).append(path)
        count_by_type.setdefault(slot.type_name, []).append(path)

    timeline = Timeline(template=template, tid=bundle.tid)
    for rec in bundle.all_records():
        activity = template.model.resolve(rec.activity)
        if rec.replica is not None:
            paths = by_hint.get((activity, rec.replica), [])
        else:
            paths = count_by_type.get(activity, [])
        if not paths:
            timeline.unbound.append((rec, "no matching slot"))
            continue
        if len(paths) > 1:
            raise AmbiguousBindingError(
                f"record for {rec.activity!r} (replica {rec.replica!r}) "
                f"matches {len(paths)} slots in trace {bundle.tid}")
        timeline.add(
            (paths[0], rec.aspect), rec.value_us,
            Prov(kind="measured", label=rec.source),
            frozenset([rec.source]))
    return timeline


# --------------------------------------------------------------------------
# Instance rule compilation

@dataclass(frozen=True)
class InstanceRule:
    rule: str
    output: Key
    inputs: tuple[Key, ...]
    op: str  # r1 | r2 | r3 | copy | pred_end | succ_begin | sum | residual | min | max


_OPS = {
    "r1": lambda v: v[1] - v[0],          # inputs (d, e) -> b
    "r2": lambda v: v[1] - v[0],          # inputs (b, e) -> d
    "r3": lambda v: v[0] + v[1],          # inputs (b, d) -> e
    "copy": lambda v: v[0],
    "pred_end": lambda v: v[0],
    "succ_begin": lambda v: v[0],
    "sum": lambda v: sum(v),
    "residual": lambda v: v[0] - sum(v[1:]),
    "min": lambda v: min(v),
    "max": lambda v: max(v),
}


@dataclass(frozen=True)
class TemplateEdge:
    """A slot-level structural relation, shared by propagation and checks."""

    kind: str  # meets | before | starts | finishes | fork | alt
    args: tuple


def template_edges(template: InstanceTemplate) -> list[TemplateEdge]:
    model = template.model
    edges: list[TemplateEdge] = []
    sibling_rel: dict[tuple[str, str], Relation] = {}
    for e in model.edges:
        if e.rel in (Relation.MEETS, Relation.BEFORE):
            sibling_rel[(e.src, e.dst)] = e.rel
    child_anchor: set[tuple[str, str, Relation]] = set()
    for e in model.edges:
        if e.rel in (Relation.STARTS, Relation.FINISHES):
            child_anchor.add((e.src, e.dst, e.rel))

    for path, slot in template.slots.items():
        t = model.types[slot.type_name]
        kids = [template.slots[c] for c in slot.children]
        by_type: dict[str, list[Slot]] = {}
        for k in kids:
            by_type.setdefault(k.type_name, []).append(k)
        for (a, b), rel in sibling_rel.items():
            for ka in by_type.get(a, []):
                for kb in by_type.get(b, []):
                    edges.append(TemplateEdge(
                        "meets" if rel == Relation.MEETS else "before",
                        (ka.path, kb.path)))
        for k in kids:
            replicated = len(by_type[k.type_name]) > 1
            for (child, parent, rel) in child_anchor:
                if k.type_name == child and slot.type_name == parent:
                    if t.kind == Kind.FORKED and replicated:
                        continue  # finisher among replicas is not static
                    edges.append(TemplateEdge(
                        "starts" if rel == Relation.STARTS else "finishes",
                        (k.path, path)))
        if t.kind == Kind.FORKED and kids:
            edges.append(TemplateEdge(
                "fork", (path, tuple(k.path for k in kids), t.sync)))
        if t.kind == Kind.ALTERNATING and kids:
            edges.append(TemplateEdge("alt", (path, tuple(k.path for k in kids))))
    return edges


def compile_instance_rules(template: InstanceTemplate,
                           ) -> tuple[list[InstanceRule], list[TemplateEdge]]:
    """Template-level rule instances plus the gapped edges (bounds only)."""
    B, D, E = Aspect.BEGIN, Aspect.DURATION, Aspect.END
    rules: list[InstanceRule] = []
    gapped: list[TemplateEdge] = []

    for path in template.slots:
        rules.append(InstanceRule("R1", (path, B), ((path, D), (path, E)), "r1"))
        rules.append(InstanceRule("R2", (path, D), ((path, B), (path, E)), "r2"))
        rules.append(InstanceRule("R3", (path, E), ((path, B), (path, D)), "r3"))

    for edge in template_edges(template):
        if edge.kind == "meets":
            a, b = edge.args
            rules.append(InstanceRule("E-MEETS", (a, E), ((b, B),), "succ_begin"))
            rules.append(InstanceRule("B-METBY", (b, B), ((a, E),), "pred_end"))
        elif edge.kind == "before":
            gapped.append(edge)
        elif edge.kind == "starts":
            child, parent = edge.args
            rules.append(InstanceRule("B-STARTS", (child, B), ((parent, B),), "copy"))
            rules.append(InstanceRule("B-STARTEDBY", (parent, B), ((child, B),), "copy"))
        elif edge.kind == "finishes":
            child, parent = edge.args
            rules.append(InstanceRule("E-FINISHES", (child, E), ((parent, E),), "copy"))
            rules.append(InstanceRule("E-FINISHEDBY", (parent, E), ((child, E),), "copy"))
        elif edge.kind == "fork":
            parent, kids, sync = edge.args
            for k in kids:
                rules.append(InstanceRule("B-FORK-DOWN", (k, B), ((parent, B),), "copy"))
            rules.append(InstanceRule(
                "B-FORK-UP", (parent, B), tuple((k, B) for k in kids), "min"))
            rules.append(InstanceRule(
                "E-FORK-UP", (parent, E), tuple((k, E) for k in kids),
                "max" if sync == Sync.WAIT_FOR_ALL else "min"))
        elif edge.kind == "alt":
            parent, kids = edge.args
            rules.append(InstanceRule(
                "D-ALT-SUM", (parent, D), tuple((k, D) for k in kids), "sum"))
            for k in kids:
                others = tuple((s, D) for s in kids if s != k)
                rules.append(InstanceRule(
                    "D-ALT-SIBLING", (k, D), ((parent, D),) + others, "residual"))
    return rules, gapped


# --------------------------------------------------------------------------
# Fixpoint propagation

def propagate(timeline: Timeline,
              compiled: tuple[list[InstanceRule], list[TemplateEdge]] | None = None,
              max_steps: int = MAX_FIXPOINT_STEPS) -> Timeline:
    """Apply instance rules to a fixpoint over the timeline's values.

    Terminates when an iteration adds no derivation whose value differs from
    all existing values of its slot-aspect. The step cap guards mis-modeled
    graphs; hitting it raises with a diagnostic instead of looping.
    """
    if compiled is None:
        compiled = compile_instance_rules(timeline.template)
    rules, gapped = compiled

    by_input: dict[Key, list[int]] = {}
    for idx, rule in enumerate(rules):
        for key in rule.inputs:
            by_input.setdefault(key, []).append(idx)

    work: list[Key] = sorted(timeline.slots, key=lambda k: (k[0], k[1].value))
    steps = 0
    while work:
        steps += 1
        if steps > max_steps:
            raise PropagationLimitError(
                f"propagation in trace {timeline.tid} exceeded {max_steps} "
                "steps; the model's derivation graph likely feeds back "
                "inconsistent values")
        key = work.pop()
        for idx in by_input.get(key, ()):
            rule = rules[idx]
            inputs = [timeline.slots.get(k) for k in rule.inputs]
            if any(not ds for ds in inputs):
                continue
            op = _OPS[rule.op]
            output = rule.output
            for combo in _combinations(inputs):
                ancestry = frozenset(rule.inputs).union(
                    *(d.ancestry for d in combo))
                if output in ancestry:
                    continue  # value already depends on what it would derive
                value = op([d.value for d in combo])
                prov = Prov(
                    kind="rule", label=rule.rule,
                    inputs=tuple(
                        InputRef(k[0], k[1], d.value, d.sources)
                        for k, d in zip(rule.inputs, combo)))
                sources = frozenset().union(*(d.sources for d in combo))
                if timeline.add(output, value, prov, sources, ancestry):
                    work.append(output)

    for edge in gapped:
        a, b = edge.args
        pred_end = timeline.resolved(a, Aspect.END)
        succ_begin = timeline.resolved(b, Aspect.BEGIN)
        if pred_end is not None:
            timeline.bounds.append(Bound((b, Aspect.BEGIN), "ge", pred_end, "B-AFTER-GAP"))
        if succ_begin is not None:
            timeline.bounds.append(Bound((a, Aspect.END), "le", succ_begin, "E-BEFORE-GAP"))
    return timeline


def _combinations(inputs: list[list[ValuedDerivation]],
                  ) -> Iterable[tuple[ValuedDerivation, ...]]:
    if len(inputs) == 1:
        for d in inputs[0]:
            yield (d,)
        return
    out: list[tuple[ValuedDerivation, ...]] = [()]
    for ds in inputs:
        out = [combo + (d,) for combo in out for d in ds]
    yield from out


# --------------------------------------------------------------------------
# Replica reduction

def reduce_replicas(timeline: Timeline,
                    reduced_template: InstanceTemplate | None = None) -> Timeline:
    """Keep only the bottleneck replica under each fork.

    WaitForAll keeps the replica with the maximum resolved end (the slowest),
    WaitForAny the minimum (the fastest); ties go to the lexicographically
    smallest replica discriminator. Paths in the result are index free.
    """
    template = timeline.template
    model = template.model
    if reduced_template is None:
        reduced_template = expand_instance_template(
            model, template.bindings, indexed=False)
    out = Timeline(template=reduced_template, tid=timeline.tid,
                   unbound=list(timeline.unbound))

    def pick(parent: Slot, replicas: list[Slot]) -> Slot:
        sync = model.types[parent.type_name].sync
        ranked = []
        for slot in replicas:
            end = timeline.resolved(slot.path, Aspect.END)
            if end is None:
                raise ReplicaRankError(
                    f"replica {slot.path} has no resolved end; cannot rank "
                    "fork replicas")
            ranked.append((end, slot.replica or "", slot))
        if sync == Sync.WAIT_FOR_ANY:
            best_end = min(r[0] for r in ranked)
        else:
            best_end = max(r[0] for r in ranked)
        survivors = sorted(r for r in ranked if r[0] == best_end)
        return survivors[0][2]

    def visit(orig_path: str, red_path: str) -> None:
        for aspect in Aspect:
            ds = timeline.slots.get((orig_path, aspect))
            if ds:
                out.slots[(red_path, aspect)] = list(ds)
        orig = template.slots[orig_path]
        red = reduced_template.slots[red_path]
        by_type: dict[str, list[Slot]] = {}
        for c in orig.children:
            by_type.setdefault(template.slots[c].type_name, []).append(template.slots[c])
        for red_child in red.children:
            ctype = reduced_template.slots[red_child].type_name
            group = by_type.get(ctype, [])
            if not group:
                continue
            if len(group) > 1:
                kept = pick(orig, group)
                out.kept_replicas[red_child] = kept.replica or kept.path
            else:
                kept = group[0]
                if model.types[ctype].multiplicity is not None:
                    out.kept_replicas[red_child] = kept.replica or kept.path
            visit(kept.path, red_child)

    visit(template.root, reduced_template.root)
    # gapped-edge bounds are recomputed against the surviving slots
    for edge in template_edges(reduced_template):
        if edge.kind != "before":
            continue
        a, b = edge.args
        pred_end = out.resolved(a, Aspect.END)
        succ_begin = out.resolved(b, Aspect.BEGIN)
        if pred_end is not None:
            out.bounds.append(Bound((b, Aspect.BEGIN), "ge", pred_end, "B-AFTER-GAP"))
        if succ_begin is not None:
            out.bounds.append(Bound((a, Aspect.END), "le", succ_begin, "E-BEFORE-GAP"))
    return out
