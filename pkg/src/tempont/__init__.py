"""tempont: declare an activity hierarchy and its sensors, then let the toolkit
infer what is observable, derive unmeasured timestamps from traces, validate the
data against the model, and localize bottlenecks by hierarchical drill-down."""

__version__ = "0.1.0"

from tempont.model import (
    Aspect,
    Kind,
    Sync,
    ActivityType,
    ActivityModel,
    InstanceTemplate,
    load_model,
    validate_well_formedness,
    expand_instance_template,
)
from tempont.observability import saturate, instrumentation_gaps
from tempont.traceio import ingest, correlate, completeness_check
from tempont.derivation import instantiate, propagate, reduce_replicas
from tempont.validation import check_conformance, check_causality, estimate_drift
from tempont.drilldown import latency_series, detect_anomaly, drill
from tempont.simulator import SimConfig, simulate

__all__ = [
    "Aspect",
    "Kind",
    "Sync",
    "ActivityType",
    "ActivityModel",
    "InstanceTemplate",
    "load_model",
    "validate_well_formedness",
    "expand_instance_template",
    "saturate",
    "instrumentation_gaps",
    "ingest",
    "correlate",
    "completeness_check",
    "instantiate",
    "propagate",
    "reduce_replicas",
    "check_conformance",
    "check_causality",
    "estimate_drift",
    "latency_series",
    "detect_anomaly",
    "drill",
    "SimConfig",
    "simulate",
]
