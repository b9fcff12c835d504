import pytest

from tempont.bundled import model_path, scenario_path
from tempont.model import expand_instance_template, load_model
from tempont.derivation import compile_instance_rules


@pytest.fixture(scope="session")
def hlf_model():
    return load_model(model_path("hlf"))


@pytest.fixture(scope="session")
def merged_model():
    return load_model(model_path("tpcc-hlf-bridge"))


@pytest.fixture(scope="session")
def template_11(hlf_model):
    return expand_instance_template(hlf_model, {"E": 1, "V": 1})


@pytest.fixture(scope="session")
def compiled_11(template_11):
    return compile_instance_rules(template_11)


@pytest.fixture(scope="session")
def roundtrip_small(hlf_model):
    """120 fault-free traces through the full intake path, shared read-only."""
    from tempont.simulator import SimConfig
    from helpers import simulate_and_derive

    config = SimConfig.load(scenario_path("roundtrip"))
    config.traces = 120
    config.seed = 51
    truth, template, timelines, report = simulate_and_derive(
        hlf_model, config, {"E": 1, "V": 1})
    assert not report.collisions
    return {"truth": truth, "template": template, "timelines": timelines}
