"""Command line interface: the end-to-end workflow as composable subcommands.

Every subcommand is a pure function of its declared file inputs and flags;
JSON outputs use sorted keys so identical inputs reproduce byte-identical
artifacts. Exit codes: 0 success, 1 findings above the error threshold,
2 usage or input errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from tempont import __version__
from tempont.bundled import list_bundled, model_path, scenario_path
from tempont.model import (
    ModelError,
    expand_instance_template,
    load_model,
    validate_well_formedness,
)
from tempont.observability import (
    gaps_to_text,
    graph_to_json,
    instrumentation_gaps,
    saturate,
)
from tempont.traceio import IngestError, correlate, ingest
from tempont.derivation import (
    AmbiguousBindingError,
    ReplicaRankError,
    compile_instance_rules,
    instantiate,
    propagate,
    reduce_replicas,
    timeline_from_json,
)
from tempont.validation import (
    DEFAULT_EPSILON_US,
    check_causality,
    check_conformance,
    drift_findings,
    drift_series_to_csv,
    estimate_drift,
)
from tempont.drilldown import (
    SeriesTooShortError,
    UnknownPathError,
    detect_anomaly,
    drill,
    latency_series,
)
from tempont import traceio

SCHEMA_VERSION = "1"

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _resolve_path(raw: str) -> Path:
    """Paths may use the bundled: shorthand for packaged data files."""
    if raw.startswith("bundled:"):
        name = raw.split(":", 1)[1]
        try:
            return model_path(name)
        except FileNotFoundError:
            return scenario_path(name)
    return Path(raw)


def _parse_bindings(raw: str | None) -> dict[str, int]:
    out: dict[str, int] = {}
    if not raw:
        return out
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bindings must look like E=1,V=2 (got {part!r})")
        key, value = part.split("=", 1)
        try:
            out[key.strip()] = int(value)
        except ValueError:
            raise UsageError(f"binding {key!r} needs an integer, got {value!r}")
    return out


def _default_epsilon() -> int:
    raw = os.environ.get("TEMPONT_EPSILON_US")
    if raw is None:
        return DEFAULT_EPSILON_US
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"TEMPONT_EPSILON_US must be an integer, got {raw!r}")


def _meta(inputs: dict[str, Path | str | None]) -> dict:
    meta: dict = {"schema_version": SCHEMA_VERSION, "tool": f"tempont {__version__}"}
    digests = {}
    for name, p in inputs.items():
        if p is None:
            continue
        path = Path(p)
        if path.is_file():
            digests[name] = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        else:
            digests[name] = str(p)
    if digests:
        meta["inputs"] = digests
    return meta


def _write_json(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    _write_text(text, out)


def _write_text(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


def _load_models(paths: list[str]):
    return load_model([_resolve_path(p) for p in paths])


def _load_bundles(path: str) -> dict[str, traceio.TraceBundle]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    bundles: dict[str, traceio.TraceBundle] = {}
    for tid, b in doc["bundles"].items():
        bundle = traceio.TraceBundle(tid=tid)
        for kind in ("records", "recovered"):
            for rec in b.get(kind, []):
                getattr(bundle, kind).append(traceio._record_from_mapping(rec, 0))
        bundle.ambiguity = b.get("ambiguity")
        bundles[tid] = bundle
    return bundles


def _bundles_to_json(bundles, report, rejects, meta) -> dict:
    return {
        **meta,
        "bundles": {
            tid: {
                "records": [r.to_json() for r in b.records],
                **({"recovered": [r.to_json() for r in b.recovered]}
                   if b.recovered else {}),
                **({"ambiguity": b.ambiguity} if b.ambiguity else {}),
            }
            for tid, b in sorted(bundles.items())
        },
        "collisions": [
            {
                "record": c.record.to_json(),
                "candidates": list(c.candidates),
                "resolved_to": c.resolved_to,
            }
            for c in report.collisions
        ],
        "unmatched": [r.to_json() for r in report.unmatched],
        "rejects": [
            {"line": r.line, "reason": r.reason, "raw": r.raw} for r in rejects
        ],
    }


# --------------------------------------------------------------------------
# subcommands

def cmd_model_validate(args) -> int:
    model = _load_models(args.model)
    violations = validate_well_formedness(model)
    if args.json:
        _write_json({
            **_meta({}),
            "model": model.name,
            "types": len(model.types),
            "violations": [
                {"code": v.code, "subject": v.subject, "detail": v.detail}
                for v in violations
            ],
        }, args.out)
    elif violations:
        for v in violations:
            print(v)
    else:
        print(f"{model.name}: well-formed ({len(model.types)} activity types)")
    return EXIT_FINDINGS if violations else EXIT_OK


def cmd_model_expand(args) -> int:
    model = _load_models(args.model)
    template = expand_instance_template(model, _parse_bindings(args.bindings))
    doc = {
        **_meta({}),
        "model": model.name,
        "bindings": dict(template.bindings),
        "count": len(template),
        "slots": [
            {
                "path": s.path,
                "type": s.type_name,
                "kind": model.types[s.type_name].kind.value,
                "replica": s.replica,
                "source": template.source_of(s.path),
                "measured": sorted(a.value for a in model.types[s.type_name].measured),
            }
            for s in template.slots.values()
        ],
    }
    _write_json(doc, args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_models(args.model)
    result = saturate(model)
    gaps = instrumentation_gaps(result, model)
    doc = {**_meta({}), "model": model.name, **graph_to_json(result)}
    doc["gaps"] = [
        {
            "target": f"{t}/{a.value}",
            "suggestions": [
                {
                    "rule": s.rule,
                    "missing": [f"{n}/{asp.value}" for n, asp in s.missing],
                }
                for s in rep.suggestions
            ],
        }
        for rep in gaps
        for t, a in [rep.target]
    ]
    if args.out:
        _write_json(doc, args.out)
    sys.stdout.write(gaps_to_text(gaps))
    return EXIT_OK


def cmd_simulate(args) -> int:
    from tempont.simulator import SimConfig, records_to_jsonl, simulate

    model = _load_models(args.model)
    config = SimConfig.load(_resolve_path(args.config))
    if args.seed is not None:
        config.seed = args.seed
    truth, records = simulate(model, _parse_bindings(args.bindings), config)
    _write_text(records_to_jsonl(records), args.out)
    if args.truth:
        _write_json({**_meta({"config": _resolve_path(args.config)}),
                     "seed": config.seed, **truth.to_json()}, args.truth)
    print(f"simulated {len(truth.traces)} traces, {len(records)} records",
          file=sys.stderr)
    return EXIT_OK


def _read_stream(path: str):
    if path == "-":
        return sys.stdin.read()
    return Path(path).read_text(encoding="utf-8")


def cmd_ingest(args) -> int:
    records, rejects = ingest(_read_stream(args.input), args.format)
    bundles, report = correlate(records, prefix_len=args.prefix_len,
                                recover=args.recover_collisions,
                                proximity_window_us=args.window_us)
    meta = _meta({"records": None if args.input == "-" else args.input})
    _write_json(_bundles_to_json(bundles, report, rejects, meta), args.out)
    print(f"{len(records)} records -> {len(bundles)} bundles, "
          f"{len(report.collisions)} collisions, {len(rejects)} rejects",
          file=sys.stderr)
    return EXIT_OK


def cmd_check_completeness(args) -> int:
    model = _load_models(args.model)
    template = expand_instance_template(model, _parse_bindings(args.bindings))
    bundles = _load_bundles(args.bundles)
    report = traceio.completeness_check(bundles, model, template)
    _write_json({**_meta({"bundles": args.bundles}), **report.to_json()}, args.out)
    incomplete = len(report.incomplete_traces)
    print(f"{incomplete} of {len(bundles)} traces incomplete", file=sys.stderr)
    return EXIT_OK


def cmd_derive(args) -> int:
    model = _load_models(args.model)
    bindings = _parse_bindings(args.bindings)
    template = expand_instance_template(model, bindings)
    compiled = compile_instance_rules(template)
    bundles = _load_bundles(args.bundles)
    reduced_template = (expand_instance_template(model, bindings, indexed=False)
                        if args.reduce else None)

    def one(bundle):
        tl = propagate(instantiate(bundle, template), compiled)
        if args.reduce:
            tl = reduce_replicas(tl, reduced_template)
        return tl

    timelines = []
    items = sorted(bundles.items())
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            timelines = list(pool.map(
                _derive_worker,
                [(args.model, args.bindings, args.reduce, tid) for tid, _ in items],
                [b for _, b in items],
                chunksize=max(1, len(items) // (args.jobs * 4) or 1)))
    else:
        timelines = [one(b) for _, b in items]

    doc = {
        **_meta({"bundles": args.bundles}),
        "bindings": bindings,
        "reduced": bool(args.reduce),
        "model": model.name,
        "traces": {tl.tid: tl.to_json() for tl in timelines},
    }
    _write_json(doc, args.out)
    print(f"derived {len(timelines)} timelines", file=sys.stderr)
    return EXIT_OK


_WORKER_STATE: dict = {}


def _derive_worker(key, bundle):
    model_paths, bindings_raw, reduce, _tid = key
    state_key = (tuple(model_paths), bindings_raw, reduce)
    if _WORKER_STATE.get("key") != state_key:
        model = _load_models(list(model_paths))
        bindings = _parse_bindings(bindings_raw)
        template = expand_instance_template(model, bindings)
        _WORKER_STATE.update({
            "key": state_key,
            "template": template,
            "compiled": compile_instance_rules(template),
            "reduced": (expand_instance_template(model, bindings, indexed=False)
                        if reduce else None),
        })
    tl = propagate(instantiate(bundle, _WORKER_STATE["template"]),
                   _WORKER_STATE["compiled"])
    if reduce:
        tl = reduce_replicas(tl, _WORKER_STATE["reduced"])
    return tl


def _load_timelines(args):
    doc = json.loads(Path(args.timelines).read_text(encoding="utf-8"))
    model = _load_models(args.model)
    bindings = {k: int(v) for k, v in doc.get("bindings", {}).items()}
    template = expand_instance_template(model, bindings,
                                        indexed=not doc.get("reduced", False))
    timelines = [
        timeline_from_json(tdoc, template)
        for _, tdoc in sorted(doc["traces"].items())
    ]
    return model, template, timelines, doc


def cmd_check(args) -> int:
    model, template, timelines, _doc = _load_timelines(args)
    eps = args.eps if args.eps is not None else _default_epsilon()
    report = check_conformance(timelines, model, epsilon_us=eps)
    findings = list(report.findings)
    findings.extend(check_causality(timelines, epsilon_us=0))
    series = None
    if args.drift_window:
        series = estimate_drift(timelines, window_us=args.drift_window)
        findings.extend(drift_findings(series, epsilon_us=eps))
        if args.drift:
            _write_text(drift_series_to_csv(series), args.drift)

    lines = "".join(json.dumps(f.to_json(), sort_keys=True) + "\n"
                    for f in findings)
    _write_text(lines, args.out)
    if args.dist:
        _write_text(report.distribution.to_csv(bucket_us=args.bucket_us), args.dist)
    if args.figures:
        figdir = Path(args.figures)
        figdir.mkdir(parents=True, exist_ok=True)
        from tempont import figures

        figures.plot_mismatch_histograms(
            report.distribution, figdir / "mismatch_histograms.png",
            bucket_us=args.bucket_us)
        if series:
            figures.plot_drift_series(series, figdir / "drift_series.png")
    errors = sum(1 for f in findings if f.severity == "error")
    print(f"{len(findings)} findings ({errors} errors) at epsilon {eps} us",
          file=sys.stderr)
    return EXIT_FINDINGS if errors else EXIT_OK


def cmd_drill(args) -> int:
    model, template, timelines, doc = _load_timelines(args)
    if doc.get("reduced") is False and any(
            model.types[s.type_name].multiplicity for s in template.slots.values()):
        print("warning: drill expects reduced timelines (derive --reduce)",
              file=sys.stderr)
    if args.series:
        s = latency_series(timelines, args.series)
        _write_text(s.to_csv(), args.series_out)
        return EXIT_OK

    root_series = latency_series(timelines, args.root)
    if args.window == "auto":
        windows = detect_anomaly(root_series, k=args.k)
        if not windows:
            print("no anomaly window detected on the root series", file=sys.stderr)
            _write_json({**_meta({"timelines": args.timelines}),
                         "root": args.root, "windows": []}, args.out)
            return EXIT_OK
        window = windows[0]
    else:
        try:
            start, end = (int(x) for x in args.window.split(":"))
        except ValueError:
            raise UsageError("--window must be auto or <start_us>:<end_us>")
        base = [p.duration_us for p in root_series.points
                if not (start <= p.t_us <= end)]
        import statistics as _st
        from tempont.drilldown import AnomalyWindow

        med = _st.median(base) if base else 0.0
        mad = _st.median([abs(d - med) for d in base]) if base else 0.0
        window = AnomalyWindow(start, end, med, mad, len(base),
                               len(base) < 30)

    eps = args.eps if args.eps is not None else _default_epsilon()
    tree = drill(timelines, args.root, window,
                 share_threshold=args.share, epsilon_us=eps)
    _write_json({
        **_meta({"timelines": args.timelines}),
        "root": args.root,
        "window": {"start_us": window.start_us, "end_us": window.end_us,
                   "low_confidence": window.low_confidence},
        "tree": tree.to_json(),
    }, args.out)
    sys.stdout.write(tree.to_text() + "\n")
    if args.figures:
        figdir = Path(args.figures)
        figdir.mkdir(parents=True, exist_ok=True)
        from tempont import figures
        from tempont.figures import drill_series_paths

        paths = drill_series_paths(tree)
        figures.plot_series(
            [latency_series(timelines, p) for p in paths],
            figdir / "drill_series.png", windows=[window])
    leaves = tree.implicated_leaves()
    print(f"implicated leaves: {', '.join(leaves) if leaves else 'none'}",
          file=sys.stderr)
    return EXIT_FINDINGS if leaves else EXIT_OK


def cmd_pipeline(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    out_dir = Path(args.out_dir or manifest.get("out_dir", "tempont-out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    models = manifest["models"]
    bindings = ",".join(f"{k}={v}" for k, v in manifest.get("bindings", {}).items())
    eps = manifest.get("epsilon_us")

    def stage(name: str, argv: list[str]) -> int:
        print(f"[pipeline] {name}: tempont {' '.join(argv)}", file=sys.stderr)
        return main(argv)

    rc_total = EXIT_OK
    artifacts = {
        "records": str(out_dir / "records.jsonl"),
        "truth": str(out_dir / "truth.json"),
        "bundles": str(out_dir / "bundles.json"),
        "completeness": str(out_dir / "completeness.json"),
        "timelines": str(out_dir / "timelines.json"),
        "findings": str(out_dir / "findings.jsonl"),
        "distributions": str(out_dir / "distributions.csv"),
        "infer": str(out_dir / "observability.json"),
        "drill": str(out_dir / "drill.json"),
    }

    rc = stage("model validate", ["model", "validate", *models, "--json",
                                  "--out", str(out_dir / "model-validate.json")])
    if rc:
        return rc
    stage("infer", ["infer", *models, "--out", artifacts["infer"]])

    if "sim_config" in manifest:
        argv = ["simulate", "--model", *models, "--config", manifest["sim_config"],
                "--out", artifacts["records"], "--truth", artifacts["truth"]]
        if bindings:
            argv += ["--bindings", bindings]
        if manifest.get("seed") is not None:
            argv += ["--seed", str(manifest["seed"])]
        rc = stage("simulate", argv)
        if rc:
            return rc
        records_file = artifacts["records"]
    else:
        records_file = manifest["records"]

    argv = ["ingest", "--format", manifest.get("format", "jsonl"),
            "--in", records_file, "--out", artifacts["bundles"],
            "--prefix-len", str(manifest.get("prefix_len", 8))]
    if manifest.get("recover_collisions"):
        argv.append("--recover-collisions")
    rc = stage("ingest", argv)
    if rc:
        return rc

    argv = ["check-completeness", "--model", *models,
            "--bundles", artifacts["bundles"], "--out", artifacts["completeness"]]
    if bindings:
        argv += ["--bindings", bindings]
    stage("check-completeness", argv)

    argv = ["derive", "--model", *models, "--bundles", artifacts["bundles"],
            "--out", artifacts["timelines"], "--jobs", str(args.jobs)]
    if bindings:
        argv += ["--bindings", bindings]
    if manifest.get("reduce", True):
        argv.append("--reduce")
    rc = stage("derive", argv)
    if rc:
        return rc

    argv = ["check", "--model", *models, "--timelines", artifacts["timelines"],
            "--out", artifacts["findings"], "--dist", artifacts["distributions"]]
    if eps is not None:
        argv += ["--eps", str(eps)]
    if manifest.get("drift_window_us"):
        argv += ["--drift-window", str(manifest["drift_window_us"]),
                 "--drift", str(out_dir / "drift.csv")]
    if manifest.get("figures", False):
        argv += ["--figures", str(out_dir / "figures")]
    rc_total = max(rc_total, stage("check", argv))

    if "drill" in manifest:
        d = manifest["drill"]
        argv = ["drill", "--model", *models, "--timelines", artifacts["timelines"],
                "--root", d["root"], "--window", str(d.get("window", "auto")),
                "--k", str(d.get("k", 5)), "--share", str(d.get("share", 0.2)),
                "--out", artifacts["drill"]]
        if manifest.get("figures", False):
            argv += ["--figures", str(out_dir / "figures")]
        rc_total = max(rc_total, stage("drill", argv))

    summary = {
        **_meta({"manifest": manifest_path}),
        "artifacts": {
            k: hashlib.sha256(Path(v).read_bytes()).hexdigest()[:16]
            for k, v in sorted(artifacts.items()) if Path(v).is_file()
        },
        "exit": rc_total,
    }
    _write_json(summary, str(out_dir / "run-manifest.json"))
    return rc_total


def cmd_bundled(args) -> int:
    if args.name:
        print(_resolve_path(f"bundled:{args.name}"))
        return EXIT_OK
    for kind, names in list_bundled().items():
        for n in names:
            print(f"{kind[:-1]}: {n}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempont",
        description="activity-model guided trace derivation, validation, "
                    "and bottleneck drill-down")
    parser.add_argument("--version", action="version",
                        version=f"tempont {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_model = sub.add_parser("model", help="model loading utilities")
    model_sub = p_model.add_subparsers(dest="model_command", required=True)
    p = model_sub.add_parser("validate", help="well-formedness checks")
    p.add_argument("model", nargs="+")
    p.add_argument("--json", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_model_validate)
    p = model_sub.add_parser("expand", help="expand the instance template")
    p.add_argument("model", nargs="+")
    p.add_argument("--bindings", default="")
    p.add_argument("--out")
    p.set_defaults(func=cmd_model_expand)

    p = sub.add_parser("infer", help="saturate observability and report gaps")
    p.add_argument("model", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="generate ground truth and records")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--bindings", default="")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="decode records and correlate bundles")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix-len", type=int, default=8)
    p.add_argument("--recover-collisions", action="store_true")
    p.add_argument("--window-us", type=int, default=60_000_000)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("correlate", help="alias of ingest for pre-decoded jsonl")
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prefix-len", type=int, default=8)
    p.add_argument("--recover-collisions", action="store_true")
    p.add_argument("--window-us", type=int, default=60_000_000)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("check-completeness",
                       help="expected vs present records per trace")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--bindings", default="")
    p.add_argument("--bundles", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_completeness)

    p = sub.add_parser("derive", help="propagate values over bundles")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--bindings", default="")
    p.add_argument("--bundles", required=True)
    p.add_argument("--reduce", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("check", help="conformance, causality, drift")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--timelines", required=True)
    p.add_argument("--eps", type=int)
    p.add_argument("--out")
    p.add_argument("--dist")
    p.add_argument("--bucket-us", type=int, default=100)
    p.add_argument("--drift")
    p.add_argument("--drift-window", type=int)
    p.add_argument("--figures")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("drill", help="hierarchical bottleneck drill-down")
    p.add_argument("--model", nargs="+", required=True)
    p.add_argument("--timelines", required=True)
    p.add_argument("--root")
    p.add_argument("--window", default="auto")
    p.add_argument("--k", type=float, default=5.0)
    p.add_argument("--share", type=float, default=0.2)
    p.add_argument("--eps", type=int)
    p.add_argument("--series", help="dump one latency series as CSV and exit")
    p.add_argument("--series-out", default="-")
    p.add_argument("--out")
    p.add_argument("--figures")
    p.set_defaults(func=cmd_drill)

    p = sub.add_parser("pipeline", help="run all stages from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bundled", help="list or locate packaged data files")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_bundled)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "drill" and not args.series and not args.root:
        parser.error("drill requires --root (or --series)")
    try:
        return args.func(args)
    except (UsageError, ModelError, IngestError, AmbiguousBindingError,
            ReplicaRankError, UnknownPathError, SeriesTooShortError,
            FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        stage = getattr(args, "command", "tempont")
        print(f"{stage}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
