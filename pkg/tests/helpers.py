"""Shared builders for the test suite: record construction, random model
documents, an independent brute-force saturator, and small pipeline drivers."""

from __future__ import annotations

import random

from tempont.model import (
    ASPECTS,
    ActivityModel,
    Aspect,
    expand_instance_template,
    load_model_documents,
)
from tempont.observability import CATALOG
from tempont.traceio import ObservationRecord, TraceBundle, correlate, ingest
from tempont.derivation import compile_instance_rules, instantiate, propagate
from tempont.simulator import SimConfig, records_to_jsonl, simulate


def rec(tid: str, activity: str, aspect: Aspect, value: int, source: str = "s",
        replica: str | None = None, kind: str = "full",
        captured: int | None = None) -> ObservationRecord:
    return ObservationRecord(
        tid=tid, tid_kind=kind, activity=activity, replica=replica,
        aspect=aspect, value_us=value, source=source,
        captured_us=captured if captured is not None else value)


def bundle_of(tid: str, records: list[ObservationRecord]) -> TraceBundle:
    return TraceBundle(tid=tid, records=records)


def brute_force_saturate(model: ActivityModel) -> dict[tuple[str, Aspect], set[str]]:
    """Exhaustive re-scan saturation, independent of the worklist engine.

    Returns inferred-rule sets per node; observed = measured or inferred.
    """
    measured = {(n, a) for n, t in model.types.items() for a in t.measured}
    instances = []
    for rule in CATALOG:
        for output, inputs in rule.instances(model):
            instances.append((rule.id, output, inputs))
    inferred: dict[tuple[str, Aspect], set[str]] = {}
    changed = True
    while changed:
        changed = False
        observed = measured | set(inferred)
        order = list(instances)
        random.Random(0xF00D + len(inferred)).shuffle(order)
        for rule_id, output, inputs in order:
            if all(n in observed for n in inputs):
                rules = inferred.setdefault(output, set())
                if rule_id not in rules:
                    rules.add(rule_id)
                    changed = True
    return inferred


def random_model_doc(seed: int, max_types: int = 10,
                     measured: str = "leaves") -> dict:
    """A random well-formed model document.

    measured: "leaves" marks every leaf begin+duration+end (and alternating
    parents' begin, which no rule can supply for their unordered children);
    "random" flags each (type, aspect) with probability 0.3.
    """
    rng = random.Random(seed)
    counter = iter(range(1000))
    budget = [rng.randint(3, max_types)]

    def node(depth: int) -> dict:
        name = f"T{next(counter)}"
        budget[0] -= 1
        leaf = budget[0] < 2 or depth >= 3 or rng.random() < 0.3
        if leaf:
            return {"name": name, "kind": "atomic"}
        kind = rng.choice(["sequential", "forked", "alternating"])
        n = min(rng.randint(2, 3), budget[0])
        if n < 2:
            return {"name": name, "kind": "atomic"}
        doc = {"name": name, "kind": kind,
               "children": [node(depth + 1) for _ in range(n)]}
        if kind == "forked":
            doc["sync"] = rng.choice(["all", "any"])
        return doc

    root = node(0)
    if "children" not in root:  # ensure at least one composite level
        root = {"name": "root", "kind": "sequential",
                "children": [root, {"name": "tail", "kind": "atomic"}]}

    def decorate(doc: dict, parent_kind: str | None) -> None:
        kids = doc.get("children", [])
        if measured == "random":
            flags = [a.value for a in ASPECTS if rng.random() < 0.3]
            if flags:
                doc["measured"] = flags
        elif not kids:
            doc["measured"] = ["begin", "duration", "end"]
        elif doc["kind"] == "alternating":
            doc["measured"] = ["begin"]
        for kid in kids:
            decorate(kid, doc["kind"])

    decorate(root, None)
    return {"name": f"random-{seed}", "activities": [root]}


def load_doc(doc: dict) -> ActivityModel:
    return load_model_documents([doc])


def simulate_and_derive(model: ActivityModel, config: SimConfig,
                        bindings: dict[str, int] | None = None,
                        prefix_len: int = 8, recover: bool = False,
                        simulate_model: ActivityModel | None = None,
                        mutate_record=None):
    """simulate -> serialize -> ingest -> correlate -> propagate, per trace.

    ``simulate_model`` generates the data while ``model`` drives the analysis
    (how a wrong analysis model meets real data); ``mutate_record`` distorts
    emitted records before ingestion.
    """
    bindings = bindings or {}
    truth, emitted = simulate(simulate_model or model, bindings, config)
    if mutate_record is not None:
        emitted = [mutate_record(r) for r in emitted]
    records, rejects = ingest(records_to_jsonl(emitted), "jsonl")
    assert not rejects, rejects[:3]
    bundles, report = correlate(records, prefix_len=prefix_len, recover=recover)
    template = expand_instance_template(model, bindings)
    compiled = compile_instance_rules(template)
    timelines = [
        propagate(instantiate(bundle, template), compiled)
        for _, bundle in sorted(bundles.items())
    ]
    return truth, template, timelines, report
