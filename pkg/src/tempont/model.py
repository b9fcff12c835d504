"""Activity models: typed activity hierarchies with interval relations.

A model is a tree of activity types (atomic, sequential, forked, alternating,
or unrefined), decorated with interval relations between siblings and between
children and their parents, sensor placement flags per temporal aspect, and
optional replication parameters on fork children.

All time values in this package are 64-bit signed integer microseconds, either
on a logical clock or epoch based; integer arithmetic keeps identity checks
(begin + duration = end) exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class Aspect(str, Enum):
    """One of the three temporal aspects of an activity instance."""

    BEGIN = "begin"
    DURATION = "duration"
    END = "end"

    def __repr__(self) -> str:  # keep fixture diffs readable
        return self.value


ASPECTS = (Aspect.BEGIN, Aspect.DURATION, Aspect.END)


class Kind(str, Enum):
    ATOMIC = "atomic"
    SEQUENTIAL = "sequential"
    FORKED = "forked"
    ALTERNATING = "alternating"
    UNREFINED = "unrefined"


class Sync(str, Enum):
    WAIT_FOR_ALL = "all"
    WAIT_FOR_ANY = "any"


class Relation(str, Enum):
    HAS_SUBACTIVITY = "hasSubactivity"
    HAS_PARENT = "hasParentActivity"
    STARTS = "starts"            # child starts its parent (shared begin)
    STARTED_BY = "startedBy"     # parent started by child
    FINISHES = "finishes"        # child finishes its parent (shared end)
    FINISHED_BY = "finishedBy"   # parent finished by child
    MEETS = "meets"              # immediate successor, zero gap
    MET_BY = "metBy"
    BEFORE = "before"            # gapped successor
    AFTER = "after"


INVERSES = {
    Relation.HAS_SUBACTIVITY: Relation.HAS_PARENT,
    Relation.HAS_PARENT: Relation.HAS_SUBACTIVITY,
    Relation.STARTS: Relation.STARTED_BY,
    Relation.STARTED_BY: Relation.STARTS,
    Relation.FINISHES: Relation.FINISHED_BY,
    Relation.FINISHED_BY: Relation.FINISHES,
    Relation.MEETS: Relation.MET_BY,
    Relation.MET_BY: Relation.MEETS,
    Relation.BEFORE: Relation.AFTER,
    Relation.AFTER: Relation.BEFORE,
}

# Relations deliberately not modelable; they carry no useful composition
# semantics here and the schema rejects them outright.
REJECTED_RELATIONS = {"during", "contains", "overlaps", "overlappedBy", "equal"}

SIBLING_RELATIONS = {Relation.MEETS, Relation.MET_BY, Relation.BEFORE, Relation.AFTER}
PARENT_CHILD_RELATIONS = {
    Relation.STARTS,
    Relation.STARTED_BY,
    Relation.FINISHES,
    Relation.FINISHED_BY,
    Relation.HAS_SUBACTIVITY,
    Relation.HAS_PARENT,
}


class ModelError(Exception):
    """Base class for model loading and expansion failures."""


class ParseError(ModelError):
    pass


class UnresolvedReferenceError(ModelError):
    pass


class ConflictingKindError(ModelError):
    pass


class ExpansionError(ModelError):
    pass


@dataclass(frozen=True)
class ActivityType:
    name: str
    kind: Kind
    sync: Sync | None = None
    service: str | None = None
    measured: frozenset[Aspect] = frozenset()
    multiplicity: str | None = None


@dataclass(frozen=True, order=True)
class RelationEdge:
    src: str
    rel: Relation
    dst: str


@dataclass(frozen=True)
class Violation:
    code: str      # W1..W6
    subject: str   # offending activity type
    detail: str

    def __str__(self) -> str:
        return f"{self.code} {self.subject}: {self.detail}"


@dataclass(frozen=True)
class ActivityModel:
    """Immutable merged activity model. Safe to share across threads."""

    name: str
    types: Mapping[str, ActivityType]
    children: Mapping[str, tuple[str, ...]]
    root: str
    edges: frozenset[RelationEdge]
    aliases: Mapping[str, str] = field(default_factory=dict)

    def parent_of(self, name: str) -> str | None:
        for parent, kids in self.children.items():
            if name in kids:
                return parent
        return None

    def resolve(self, name: str) -> str:
        """Map an alias (or canonical name) to the canonical type name."""
        seen = set()
        while name in self.aliases and name not in seen:
            seen.add(name)
            name = self.aliases[name]
        return name

    def type_of(self, name: str) -> ActivityType:
        return self.types[self.resolve(name)]

    def edges_from(self, src: str, rel: Relation) -> list[str]:
        return sorted(e.dst for e in self.edges if e.src == src and e.rel == rel)

    def siblings(self, name: str) -> tuple[str, ...]:
        parent = self.parent_of(name)
        if parent is None:
            return ()
        return tuple(c for c in self.children[parent] if c != name)

    def to_document(self) -> dict:
        """Serialize back into the single-file model document format."""

        def node(name: str) -> dict:
            t = self.types[name]
            doc: dict = {"name": t.name, "kind": t.kind.value}
            if t.sync is not None:
                doc["sync"] = t.sync.value
            if t.service is not None:
                doc["service"] = t.service
            if t.measured:
                doc["measured"] = sorted(a.value for a in t.measured)
            if t.multiplicity is not None:
                doc["multiplicity"] = t.multiplicity
            kids = self.children.get(name, ())
            if kids:
                doc["children"] = [node(k) for k in kids]
            return doc

        relations = []
        for e in sorted(self.edges):
            if e.rel in (Relation.BEFORE, Relation.FINISHES, Relation.STARTS):
                if e.rel == Relation.BEFORE or self._explicit_parent_edge(e):
                    relations.append({"from": e.src, "rel": e.rel.value, "to": e.dst})
        doc = {"name": self.name, "activities": [node(self.root)]}
        if relations:
            doc["relations"] = relations
        if self.aliases:
            doc["aliases"] = [[a, c] for a, c in sorted(self.aliases.items())]
        return doc

    def _explicit_parent_edge(self, e: RelationEdge) -> bool:
        # starts/finishes edges implied by sequential nesting are regenerated
        # by the loader; only ones against non-sequential parents must be kept.
        parent = self.parent_of(e.src)
        return parent == e.dst and self.types[parent].kind != Kind.SEQUENTIAL


@dataclass(frozen=True)
class Slot:
    """One node of an expanded per-trace instance tree."""

    path: str
    type_name: str
    parent: str | None
    replica: str | None        # service instance discriminator, e.g. "peer1"
    replica_index: int | None
    children: tuple[str, ...]


@dataclass(frozen=True)
class InstanceTemplate:
    model: ActivityModel
    bindings: Mapping[str, int]
    slots: Mapping[str, Slot]  # preorder
    root: str

    def __len__(self) -> int:
        return len(self.slots)

    def source_of(self, path: str) -> str | None:
        """Service instance expected to emit records for this slot."""
        slot = self.slots[path]
        service = self.model.types[slot.type_name].service
        if service is None:
            return None
        if slot.replica_index is not None:
            return f"{service}{slot.replica_index}"
        return service


# --------------------------------------------------------------------------
# Loading

_KINDS = {k.value: k for k in Kind}
_SYNCS = {s.value: s for s in Sync}
_ASPECT_NAMES = {a.value: a for a in Aspect}


def _parse_activity(doc: dict, path: str, out: dict[str, ActivityType],
                    children: dict[str, tuple[str, ...]], order: list[str]) -> str:
    if not isinstance(doc, dict) or "name" not in doc:
        raise ParseError(f"{path}: activity entries need a 'name'")
    name = doc["name"]
    if not isinstance(name, str) or not name:
        raise ParseError(f"{path}: activity name must be a non-empty string")
    if name in out:
        raise ParseError(f"{path}: duplicate activity name {name!r}")
    kind_raw = doc.get("kind", "atomic")
    if kind_raw not in _KINDS:
        raise ParseError(f"{path}: unknown kind {kind_raw!r} for {name}")
    kind = _KINDS[kind_raw]
    sync = None
    if "sync" in doc:
        if doc["sync"] not in _SYNCS:
            raise ParseError(f"{path}: unknown sync {doc['sync']!r} for {name}")
        if kind != Kind.FORKED:
            raise ParseError(f"{path}: sync only allowed on forked activities ({name})")
        sync = _SYNCS[doc["sync"]]
    measured = frozenset()
    if "measured" in doc:
        bad = [m for m in doc["measured"] if m not in _ASPECT_NAMES]
        if bad:
            raise ParseError(f"{path}: unknown measured aspects {bad} for {name}")
        measured = frozenset(_ASPECT_NAMES[m] for m in doc["measured"])
    multiplicity = doc.get("multiplicity")
    if multiplicity is not None and (not isinstance(multiplicity, str) or not multiplicity):
        raise ParseError(f"{path}: multiplicity must name a parameter ({name})")
    out[name] = ActivityType(
        name=name,
        kind=kind,
        sync=sync,
        service=doc.get("service"),
        measured=measured,
        multiplicity=multiplicity,
    )
    order.append(name)
    kids = doc.get("children", [])
    if kids and kind in (Kind.ATOMIC, Kind.UNREFINED):
        raise ParseError(f"{path}: {kind.value} activity {name} cannot have children")
    children[name] = tuple(
        _parse_activity(kid, path, out, children, order) for kid in kids
    )
    return name


def _parse_document(doc: dict, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: model document must be a JSON object")
    types: dict[str, ActivityType] = {}
    children: dict[str, tuple[str, ...]] = {}
    order: list[str] = []
    roots = [
        _parse_activity(a, path, types, children, order)
        for a in doc.get("activities", [])
    ]
    relations = []
    for rel in doc.get("relations", []):
        if not isinstance(rel, dict) or set(rel) != {"from", "rel", "to"}:
            raise ParseError(f"{path}: relations need exactly from/rel/to keys")
        if rel["rel"] in REJECTED_RELATIONS:
            raise ParseError(
                f"{path}: relation {rel['rel']!r} is not modelable (only "
                "meets/before chains plus starts/finishes anchors are)")
        try:
            relations.append((rel["from"], Relation(rel["rel"]), rel["to"]))
        except ValueError:
            raise ParseError(f"{path}: unknown relation {rel['rel']!r}") from None
    aliases = []
    for pair in doc.get("aliases", []):
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ParseError(f"{path}: aliases must be [name, name] pairs")
        aliases.append((pair[0], pair[1]))
    return {
        "name": doc.get("name", Path(path).stem),
        "types": types,
        "children": children,
        "roots": roots,
        "relations": relations,
        "aliases": aliases,
    }


def _load_documents(source: str | Path, seen: set[Path]) -> list[dict]:
    path = Path(source)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read model document {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    resolved = path.resolve()
    if resolved in seen:
        return []
    seen.add(resolved)
    docs = []
    for imp in doc.get("imports", []):
        docs.extend(_load_documents(path.parent / imp, seen))
    docs.append(_parse_document(doc, str(path)))
    return docs


def _canonicalize_aliases(pairs: Iterable[tuple[str, str]],
                          types: dict[str, ActivityType]) -> dict[str, str]:
    """Union aliased names; the member with a refined kind wins as canonical."""
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    groups: dict[str, list[str]] = {}
    for name in set(parent) | {n for p in pairs for n in p}:
        groups.setdefault(find(name), []).append(name)
    mapping: dict[str, str] = {}
    for members in groups.values():
        known = [m for m in members if m in types]
        refined = [m for m in known if types[m].kind != Kind.UNREFINED]
        kinds = {types[m].kind for m in refined}
        if len(kinds) > 1:
            raise ConflictingKindError(
                f"aliased types {sorted(members)} have conflicting kinds "
                f"{sorted(k.value for k in kinds)}")
        canonical = refined[0] if refined else (known[0] if known else members[0])
        for m in members:
            if m != canonical:
                mapping[m] = canonical
    return mapping


def _merge_aliased_types(types: dict[str, ActivityType],
                         aliases: dict[str, str]) -> dict[str, ActivityType]:
    merged = dict(types)
    for alias, canonical in aliases.items():
        if alias not in merged:
            continue
        if canonical not in merged:
            raise UnresolvedReferenceError(
                f"alias {alias!r} points at undeclared type {canonical!r}")
        a, c = merged.pop(alias), merged[canonical]
        service = c.service or a.service
        if a.service and c.service and a.service != c.service:
            raise ConflictingKindError(
                f"aliased types {alias!r}/{canonical!r} bound to different "
                f"services {a.service!r}/{c.service!r}")
        merged[canonical] = replace(
            c, measured=c.measured | a.measured, service=service,
            multiplicity=c.multiplicity or a.multiplicity)
    return merged


def load_model(sources: Sequence[str | Path] | str | Path) -> ActivityModel:
    """Load one or more model documents (plus their imports) into one model.

    Documents merge by name: aliases collapse equivalent types, sibling order
    comes from each document's nesting, and sequential nesting implies the
    startedBy / finishedBy / meets edge chain (an explicit ``before`` relation
    overrides the meets between that pair). All inverse edges are materialized.
    """
    if isinstance(sources, (str, Path)):
        sources = [sources]
    seen: set[Path] = set()
    docs: list[dict] = []
    for src in sources:
        docs.extend(_load_documents(src, seen))
    if not docs:
        raise ParseError("no model documents given")
    return load_model_documents(docs)


def load_model_documents(docs: Sequence[dict]) -> ActivityModel:
    """Merge pre-parsed documents; exposed for building models in memory."""
    if docs and all(isinstance(d, dict) and "types" not in d for d in docs):
        docs = [_parse_document(d, d.get("name", "<memory>")) for d in docs]

    types: dict[str, ActivityType] = {}
    children: dict[str, tuple[str, ...]] = {}
    roots: list[str] = []
    relations: list[tuple[str, Relation, str]] = []
    alias_pairs: list[tuple[str, str]] = []
    name = docs[-1]["name"]
    for doc in docs:
        for tname, t in doc["types"].items():
            if tname in types:
                raise ParseError(f"type {tname!r} declared in more than one document")
            types[tname] = t
        children.update(doc["children"])
        roots.extend(doc["roots"])
        relations.extend(doc["relations"])
        alias_pairs.extend(doc["aliases"])

    aliases = _canonicalize_aliases(alias_pairs, types)
    types = _merge_aliased_types(types, aliases)

    def canon(n: str) -> str:
        seen_names: set[str] = set()
        while n in aliases and n not in seen_names:
            seen_names.add(n)
            n = aliases[n]
        return n

    children = {
        canon(p): tuple(canon(c) for c in kids)
        for p, kids in children.items()
        if canon(p) in types
    }
    relations = [(canon(a), rel, canon(b)) for a, rel, b in relations]
    roots = [canon(r) for r in roots]

    for a, rel, b in relations:
        for n in (a, b):
            if n not in types:
                raise UnresolvedReferenceError(
                    f"relation {rel.value} references undeclared type {n!r}")
    for p, kids in children.items():
        for c in kids:
            if c not in types:
                raise UnresolvedReferenceError(f"undeclared child type {c!r}")

    parent_of: dict[str, str] = {}
    for p, kids in children.items():
        for c in kids:
            if c in parent_of and parent_of[c] != p:
                raise ParseError(f"type {c!r} nested under two parents")
            parent_of[c] = p
    top = [r for r in dict.fromkeys(roots) if r not in parent_of]
    if len(top) != 1:
        raise ParseError(
            f"model must have a single root, found {sorted(top) or 'none'}")
    root = top[0]

    # multiplicity only on direct children of forked parents
    for tname, t in types.items():
        if t.multiplicity is not None:
            p = parent_of.get(tname)
            if p is None or types[p].kind != Kind.FORKED:
                raise ParseError(
                    f"multiplicity on {tname!r} requires a forked parent")

    edges: set[RelationEdge] = set()

    def add(a: str, rel: Relation, b: str) -> None:
        edges.add(RelationEdge(a, rel, b))
        edges.add(RelationEdge(b, INVERSES[rel], a))

    explicit_before = {
        (a, b) for a, rel, b in relations if rel == Relation.BEFORE
    } | {(b, a) for a, rel, b in relations if rel == Relation.AFTER}

    for p, kids in children.items():
        for c in kids:
            add(p, Relation.HAS_SUBACTIVITY, c)
        if types[p].kind == Kind.SEQUENTIAL and kids:
            add(kids[0], Relation.STARTS, p)
            add(kids[-1], Relation.FINISHES, p)
            for a, b in zip(kids, kids[1:]):
                add(a, Relation.BEFORE if (a, b) in explicit_before else Relation.MEETS, b)

    for a, rel, b in relations:
        if rel in (Relation.MET_BY, Relation.AFTER, Relation.STARTED_BY, Relation.FINISHED_BY):
            a, rel, b = b, INVERSES[rel], a
        if rel in (Relation.MEETS, Relation.BEFORE):
            if parent_of.get(a) != parent_of.get(b):
                raise ParseError(
                    f"{rel.value} between {a!r} and {b!r}: only siblings may "
                    "carry ordering relations")
            pk = types[parent_of.get(a, "")].kind if parent_of.get(a) else None
            if pk == Kind.FORKED:
                raise ParseError(
                    f"{rel.value} between {a!r} and {b!r}: forked children are "
                    "unordered")
        elif rel in (Relation.STARTS, Relation.FINISHES):
            if parent_of.get(a) != b:
                raise ParseError(
                    f"{rel.value}: {a!r} is not a child of {b!r}")
        elif rel in (Relation.HAS_SUBACTIVITY, Relation.HAS_PARENT):
            raise ParseError("parent/child edges are implied by nesting; "
                             "do not declare them explicitly")
        add(a, rel, b)

    return ActivityModel(
        name=name,
        types=types,
        children=children,
        root=root,
        edges=frozenset(edges),
        aliases=aliases,
    )


# --------------------------------------------------------------------------
# Well-formedness

def validate_well_formedness(model: ActivityModel) -> list[Violation]:
    """Run the named structural checks; empty list iff the model is well formed.

    W1 sequential parents have exactly one starting and one finishing child;
    W2 the starting child has no predecessor edge, the finishing child no
    successor edge; W3 sequential siblings form one meets/before chain;
    W4 forked parents have >= 2 children (or one replicated child) and a sync
    semantic; W5 atomic types are childless; W6 every edge has its inverse and
    ordering edges connect siblings only.
    """
    out: list[Violation] = []
    edges = model.edges

    def has(a: str, rel: Relation, b: str) -> bool:
        return RelationEdge(a, rel, b) in edges

    for name, t in model.types.items():
        kids = model.children.get(name, ())
        if t.kind == Kind.SEQUENTIAL:
            starters = [c for c in kids if has(c, Relation.STARTS, name)]
            finishers = [c for c in kids if has(c, Relation.FINISHES, name)]
            if len(starters) != 1 or len(finishers) != 1:
                out.append(Violation(
                    "W1", name,
                    f"sequential parent needs exactly one starting and one "
                    f"finishing child, found {len(starters)}/{len(finishers)}"))
                continue
            start, finish = starters[0], finishers[0]
            w2 = False
            preds = [e for e in edges if e.dst == start and e.src in kids
                     and e.rel in (Relation.MEETS, Relation.BEFORE)]
            if preds:
                w2 = True
                out.append(Violation(
                    "W2", name, f"starting child {start!r} has a predecessor"))
            succs = [e for e in edges if e.src == finish and e.dst in kids
                     and e.rel in (Relation.MEETS, Relation.BEFORE)]
            if succs:
                w2 = True
                out.append(Violation(
                    "W2", name, f"finishing child {finish!r} has a successor"))
            if w2:
                continue  # the chain shape is already known broken
            # W3: single chain start -> ... -> finish covering all children
            succ_of: dict[str, list[str]] = {c: [] for c in kids}
            pred_of: dict[str, list[str]] = {c: [] for c in kids}
            for e in edges:
                if (e.rel in (Relation.MEETS, Relation.BEFORE)
                        and e.src in succ_of and e.dst in pred_of):
                    succ_of[e.src].append(e.dst)
                    pred_of[e.dst].append(e.src)
            ok = all(len(v) <= 1 for v in succ_of.values())
            ok = ok and all(len(v) <= 1 for v in pred_of.values())
            if ok:
                chain, cur, guard = [start], start, 0
                while succ_of[cur] and guard <= len(kids):
                    cur = succ_of[cur][0]
                    chain.append(cur)
                    guard += 1
                ok = cur == finish and len(chain) == len(kids) == len(set(chain))
            if not ok:
                out.append(Violation(
                    "W3", name, "children do not form a single ordering chain"))
        elif t.kind == Kind.FORKED:
            replicated = len(kids) == 1 and model.types[kids[0]].multiplicity
            if len(kids) < 2 and not replicated:
                out.append(Violation(
                    "W4", name,
                    "forked parent needs >= 2 children or one replicated child"))
            if t.sync is None:
                out.append(Violation("W4", name, "forked parent lacks a sync semantic"))
        elif t.kind == Kind.ATOMIC and kids:
            out.append(Violation("W5", name, "atomic type has children"))

    for e in edges:
        if RelationEdge(e.dst, INVERSES[e.rel], e.src) not in edges:
            out.append(Violation(
                "W6", e.src, f"edge {e.rel.value}->{e.dst} lacks its inverse"))
        if e.rel in SIBLING_RELATIONS:
            if model.parent_of(e.src) != model.parent_of(e.dst):
                out.append(Violation(
                    "W6", e.src,
                    f"{e.rel.value} edge to non-sibling {e.dst!r}"))
    return out


# --------------------------------------------------------------------------
# Template expansion

def expand_instance_template(model: ActivityModel,
                             bindings: Mapping[str, int] | None = None,
                             indexed: bool = True) -> InstanceTemplate:
    """Expand the model tree into per-trace slots, replicating fork children.

    Each multiplicity-bearing child is expanded into its bound count of
    replicas with unique paths (``.../Endorsement[1]/...``) and a service
    instance discriminator (``peer1``). With ``indexed=False`` every
    multiplicity binds to 1 and paths stay index free (the reduced shape that
    drill-down consumes).
    """
    bindings = dict(bindings or {})
    slots: dict[str, Slot] = {}

    def build(name: str, prefix: str, parent: str | None,
              replica: str | None, replica_index: int | None,
              segment: str | None = None) -> str:
        t = model.types[name]
        if t.kind == Kind.UNREFINED:
            raise ExpansionError(
                f"unrefined activity {name!r} must be refined (via a bridge "
                "alias) before expansion")
        seg = segment or name
        path = f"{prefix}/{seg}" if prefix else seg
        child_paths: list[str] = []
        for child in model.children.get(name, ()):
            ct = model.types[child]
            if ct.multiplicity is not None:
                param = ct.multiplicity
                if indexed:
                    if param not in bindings:
                        raise ExpansionError(
                            f"unbound multiplicity parameter {param!r}")
                    count = bindings[param]
                    if not isinstance(count, int) or count < 1:
                        raise ExpansionError(
                            f"multiplicity parameter {param!r} must bind to a "
                            f"positive integer, got {count!r}")
                else:
                    count = 1
                for i in range(count):
                    disc = f"{ct.service}{i}" if ct.service else f"replica{i}"
                    seg_i = f"{child}[{i}]" if indexed else child
                    child_paths.append(build(child, path, path, disc, i, seg_i))
            else:
                child_paths.append(build(child, path, path, replica, replica_index))
        slots[path] = Slot(
            path=path, type_name=name, parent=parent,
            replica=replica, replica_index=replica_index,
            children=tuple(child_paths))
        return path

    root_path = build(model.root, "", None, None, None)
    ordered: dict[str, Slot] = {}

    def visit(path: str) -> None:
        ordered[path] = slots[path]
        for c in slots[path].children:
            visit(c)

    visit(root_path)
    return InstanceTemplate(model=model, bindings=bindings, slots=ordered,
                            root=root_path)
