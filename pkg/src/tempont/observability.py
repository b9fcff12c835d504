"""Class-level observability saturation.

Starting from the measured-aspect flags, a fixed (but extensible) catalog of
monotone inference rules is applied to a least fixpoint. Each rule instance
maps a set of observed (type, aspect) inputs to one inferable output; the
applications are collected into a derivation graph that later drives
instance-level value propagation and gap reporting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

from tempont.model import (
    ASPECTS,
    ActivityModel,
    Aspect,
    Kind,
    Relation,
)

Node = tuple[str, Aspect]


@dataclass(frozen=True)
class RuleApplication:
    """One firing of a rule: all inputs observed makes the output inferable."""

    rule: str
    output: Node
    inputs: tuple[Node, ...]


@dataclass(frozen=True)
class Rule:
    """A catalog entry: target aspect plus an instance enumerator.

    The enumerator yields (output, inputs) pairs over a concrete model; the
    saturation core is generic, so registering additional rules is just a
    matter of appending to the catalog passed to :func:`saturate`.
    """

    id: str
    aspect: Aspect
    instances: Callable[[ActivityModel], Iterator[tuple[Node, tuple[Node, ...]]]]


def _identity_rule(target: Aspect, inputs: tuple[Aspect, Aspect]):
    def gen(model: ActivityModel):
        for name in model.types:
            yield (name, target), tuple((name, a) for a in inputs)
    return gen


def _edge_rule(rel: Relation, target: Aspect, source: Aspect):
    def gen(model: ActivityModel):
        for e in model.edges:
            if e.rel == rel:
                yield (e.src, target), ((e.dst, source),)
    return gen


def _fork_child_begin(model: ActivityModel):
    for name, t in model.types.items():
        parent = model.parent_of(name)
        if parent is not None and model.types[parent].kind == Kind.FORKED:
            yield (name, Aspect.BEGIN), ((parent, Aspect.BEGIN),)


def _fork_up(target: Aspect):
    def gen(model: ActivityModel):
        for name, t in model.types.items():
            kids = model.children.get(name, ())
            if t.kind == Kind.FORKED and kids:
                yield (name, target), tuple((c, target) for c in kids)
    return gen


def _alt_sum(model: ActivityModel):
    for name, t in model.types.items():
        kids = model.children.get(name, ())
        if t.kind == Kind.ALTERNATING and kids:
            yield (name, Aspect.DURATION), tuple((c, Aspect.DURATION) for c in kids)


def _alt_sibling(model: ActivityModel):
    for name in model.types:
        parent = model.parent_of(name)
        if parent is None or model.types[parent].kind != Kind.ALTERNATING:
            continue
        inputs = [(parent, Aspect.DURATION)]
        inputs += [(s, Aspect.DURATION) for s in model.children[parent] if s != name]
        yield (name, Aspect.DURATION), tuple(inputs)


# The three two-of-three identity rules, then the relation-driven rules.
CATALOG: tuple[Rule, ...] = (
    Rule("R1", Aspect.BEGIN, _identity_rule(Aspect.BEGIN, (Aspect.DURATION, Aspect.END))),
    Rule("R2", Aspect.DURATION, _identity_rule(Aspect.DURATION, (Aspect.BEGIN, Aspect.END))),
    Rule("R3", Aspect.END, _identity_rule(Aspect.END, (Aspect.BEGIN, Aspect.DURATION))),
    Rule("B-FORK-UP", Aspect.BEGIN, _fork_up(Aspect.BEGIN)),
    Rule("B-STARTS", Aspect.BEGIN, _edge_rule(Relation.STARTS, Aspect.BEGIN, Aspect.BEGIN)),
    Rule("B-STARTEDBY", Aspect.BEGIN, _edge_rule(Relation.STARTED_BY, Aspect.BEGIN, Aspect.BEGIN)),
    Rule("B-METBY", Aspect.BEGIN, _edge_rule(Relation.MET_BY, Aspect.BEGIN, Aspect.END)),
    Rule("B-FORK-DOWN", Aspect.BEGIN, _fork_child_begin),
    Rule("D-ALT-SIBLING", Aspect.DURATION, _alt_sibling),
    Rule("D-ALT-SUM", Aspect.DURATION, _alt_sum),
    Rule("E-MEETS", Aspect.END, _edge_rule(Relation.MEETS, Aspect.END, Aspect.BEGIN)),
    Rule("E-FINISHES", Aspect.END, _edge_rule(Relation.FINISHES, Aspect.END, Aspect.END)),
    Rule("E-FINISHEDBY", Aspect.END, _edge_rule(Relation.FINISHED_BY, Aspect.END, Aspect.END)),
    Rule("E-FORK-UP", Aspect.END, _fork_up(Aspect.END)),
)

RULE_IDS = tuple(r.id for r in CATALOG)


@dataclass
class SaturationResult:
    """Least fixpoint of the rule catalog over a model's measured flags.

    ``measured`` and ``inferred`` may overlap: a directly sensed aspect can
    also match rules, and every such application is kept in the graph.
    """

    measured: frozenset[Node]
    inferred: Mapping[Node, frozenset[str]]
    applications: tuple[RuleApplication, ...]
    nodes: tuple[Node, ...]

    def observed(self, node: Node) -> bool:
        return node in self.measured or node in self.inferred

    def status(self, node: Node) -> str:
        m, i = node in self.measured, node in self.inferred
        if m and i:
            return "measured+inferred"
        if m:
            return "measured"
        if i:
            return "inferred"
        return "unobserved"

    @property
    def observed_nodes(self) -> frozenset[Node]:
        return self.measured | frozenset(self.inferred)

    @property
    def unobserved_nodes(self) -> tuple[Node, ...]:
        return tuple(n for n in self.nodes if not self.observed(n))


# DerivationGraph in the external JSON sense is (nodes, edges=applications);
# SaturationResult carries both, so downstream code passes the result around.
DerivationGraph = SaturationResult


def saturate(model: ActivityModel,
             rules: Sequence[Rule] = CATALOG) -> SaturationResult:
    """Saturate observability flags to their least fixpoint.

    The rules are monotone, so the fixpoint (and the set of recorded rule
    applications) is independent of application order; the graph records every
    applicable rule instance, not just the first one that made a node
    observable.
    """
    nodes = tuple((name, a) for name in model.types for a in ASPECTS)
    measured = frozenset(
        (name, a) for name, t in model.types.items() for a in t.measured)

    instances: list[tuple[str, Node, tuple[Node, ...]]] = []
    by_input: dict[Node, list[int]] = {}
    for rule in rules:
        for output, inputs in rule.instances(model):
            idx = len(instances)
            instances.append((rule.id, output, inputs))
            for node in inputs:
                by_input.setdefault(node, []).append(idx)

    observed: set[Node] = set(measured)
    inferred: dict[Node, set[str]] = {}
    fired: set[int] = set()
    applications: list[RuleApplication] = []

    work = list(measured)
    # zero-input instances (none in the stock catalog, but registration allows)
    pending = [i for i, (_, _, ins) in enumerate(instances) if not ins]
    while work or pending:
        candidates = pending
        pending = []
        while work:
            node = work.pop()
            candidates.extend(by_input.get(node, ()))
        for idx in candidates:
            if idx in fired:
                continue
            rule_id, output, inputs = instances[idx]
            if all(n in observed for n in inputs):
                fired.add(idx)
                applications.append(RuleApplication(rule_id, output, inputs))
                inferred.setdefault(output, set()).add(rule_id)
                if output not in observed:
                    observed.add(output)
                    work.append(output)

    applications.sort(key=lambda a: (a.output, a.rule, a.inputs))
    return SaturationResult(
        measured=measured,
        inferred={n: frozenset(r) for n, r in inferred.items()},
        applications=tuple(applications),
        nodes=nodes,
    )


@dataclass(frozen=True)
class GapSuggestion:
    rule: str
    missing: tuple[Node, ...]
    inputs: tuple[Node, ...]


@dataclass(frozen=True)
class GapReport:
    """An unobserved (type, aspect) plus the cheapest ways to close the hole."""

    target: Node
    suggestions: tuple[GapSuggestion, ...]  # sorted by fewest missing inputs


def instrumentation_gaps(result: SaturationResult, model: ActivityModel,
                         rules: Sequence[Rule] = CATALOG) -> list[GapReport]:
    """List unobserved aspects with the rules that could supply them.

    For each rule targeting an unobserved node, the still-missing inputs are
    reported; suggestions are ranked by how few inputs are missing, which
    points at the cheapest additional sensor placement.
    """
    reports: list[GapReport] = []
    targeting: dict[Node, list[tuple[str, tuple[Node, ...]]]] = {}
    for rule in rules:
        for output, inputs in rule.instances(model):
            targeting.setdefault(output, []).append((rule.id, inputs))
    for node in result.unobserved_nodes:
        suggestions = []
        for rule_id, inputs in targeting.get(node, []):
            missing = tuple(n for n in inputs if not result.observed(n))
            suggestions.append(GapSuggestion(rule_id, missing, inputs))
        suggestions.sort(key=lambda s: (len(s.missing), s.rule))
        reports.append(GapReport(target=node, suggestions=tuple(suggestions)))
    return reports


def graph_to_json(result: SaturationResult) -> dict:
    """Status map plus derivation graph in the documented JSON layout."""
    status = {
        f"{name}/{aspect.value}": result.status((name, aspect))
        for name, aspect in result.nodes
    }
    return {
        "nodes": [f"{n}/{a.value}" for n, a in result.nodes],
        "edges": [
            {
                "rule": app.rule,
                "output": f"{app.output[0]}/{app.output[1].value}",
                "inputs": [f"{n}/{a.value}" for n, a in app.inputs],
            }
            for app in result.applications
        ],
        "status": status,
    }


def gaps_to_text(reports: Sequence[GapReport]) -> str:
    if not reports:
        return "no instrumentation gaps: every aspect is observable\n"
    lines = [f"{len(reports)} unobserved aspects:"]
    for rep in reports:
        name, aspect = rep.target
        lines.append(f"  {name} [{aspect.value}]")
        if not rep.suggestions:
            lines.append("    no rule targets this aspect; needs a direct sensor")
        for s in rep.suggestions[:3]:
            if s.missing:
                miss = ", ".join(f"{n} [{a.value}]" for n, a in s.missing)
                lines.append(f"    via {s.rule}: missing {miss}")
            else:
                lines.append(f"    via {s.rule}: inputs observable (rule satisfied)")
    return "\n".join(lines) + "\n"
