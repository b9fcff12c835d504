import dataclasses
import random

from hypothesis import given, settings, strategies as st

from tempont.model import Aspect
from tempont.observability import (
    CATALOG,
    graph_to_json,
    instrumentation_gaps,
    saturate,
)
from helpers import brute_force_saturate, load_doc, random_model_doc

B, D, E = Aspect.BEGIN, Aspect.DURATION, Aspect.END


def _single_type(measured):
    return load_doc({
        "name": "one",
        "activities": [{"name": "Task", "kind": "atomic", "measured": measured}],
    })


def test_two_of_three_rule():
    result = saturate(_single_type(["duration", "end"]))
    assert result.status(("Task", B)) == "inferred"
    assert result.inferred[("Task", B)] == {"R1"}


def test_all_three_rules_fire_when_fully_observed():
    # once two aspects make the third observable, every identity rule matches
    result = saturate(_single_type(["duration", "end"]))
    rules = {a.rule for a in result.applications if a.output[0] == "Task"}
    assert {"R1", "R2", "R3"} <= rules


def test_empty_fixpoint():
    result = saturate(_single_type([]))
    assert all(result.status(n) == "unobserved" for n in result.nodes)
    assert result.applications == ()


def test_measured_and_inferred_coexist():
    result = saturate(_single_type(["begin", "duration", "end"]))
    assert result.status(("Task", B)) == "measured+inferred"


def test_hlf_fully_observable(hlf_model):
    result = saturate(hlf_model)
    assert len(result.nodes) == 84
    assert len(result.measured) == 18
    assert result.unobserved_nodes == ()


def test_hlf_chaincode_call_gap(hlf_model):
    # dropping the peer-side chaincode call sensor breaks the endorsement chain
    types = dict(hlf_model.types)
    types["Chaincode call"] = dataclasses.replace(
        types["Chaincode call"], measured=frozenset())
    mutated = dataclasses.replace(hlf_model, types=types)
    result = saturate(mutated)
    gaps = instrumentation_gaps(result, mutated)
    by_target = {g.target: g for g in gaps}
    assert ("Chaincode call", B) in by_target
    r1 = [s for s in by_target[("Chaincode call", B)].suggestions if s.rule == "R1"]
    assert len(r1) == 1
    assert set(r1[0].missing) == {("Chaincode call", D), ("Chaincode call", E)}


def test_fully_observable_model_has_no_gaps(hlf_model):
    result = saturate(hlf_model)
    assert instrumentation_gaps(result, hlf_model) == []


def test_single_type_gap_one_input_short():
    model = _single_type(["begin"])
    result = saturate(model)
    gaps = {g.target: g for g in instrumentation_gaps(result, model)}
    assert set(gaps) == {("Task", D), ("Task", E)}
    d_best = gaps[("Task", D)].suggestions[0]
    assert d_best.rule == "R2" and d_best.missing == (("Task", E),)
    e_best = gaps[("Task", E)].suggestions[0]
    assert e_best.rule == "R3" and e_best.missing == (("Task", D),)


def test_monotonicity_adding_sensors(hlf_model):
    types = dict(hlf_model.types)
    types["Chaincode execution"] = dataclasses.replace(
        types["Chaincode execution"], measured=frozenset())
    smaller = dataclasses.replace(hlf_model, types=types)
    before = saturate(smaller).observed_nodes
    after = saturate(hlf_model).observed_nodes
    assert before <= after


def test_confluence_under_rule_order(hlf_model):
    reference = saturate(hlf_model)
    ref_status = {n: reference.status(n) for n in reference.nodes}
    ref_apps = set(reference.applications)
    for trial in range(100):
        rules = list(CATALOG)
        random.Random(trial).shuffle(rules)
        result = saturate(hlf_model, rules=rules)
        assert {n: result.status(n) for n in result.nodes} == ref_status
        assert set(result.applications) == ref_apps


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_engine_matches_brute_force(seed):
    model = load_doc(random_model_doc(seed, max_types=8, measured="random"))
    result = saturate(model)
    oracle = brute_force_saturate(model)
    assert {n: rules for n, rules in result.inferred.items()} == oracle


def test_graph_json_layout(hlf_model):
    doc = graph_to_json(saturate(hlf_model))
    assert set(doc) == {"nodes", "edges", "status"}
    assert len(doc["nodes"]) == 84
    assert all(doc["status"][n] != "unobserved" for n in doc["nodes"])
    assert all({"rule", "output", "inputs"} == set(e) for e in doc["edges"])
