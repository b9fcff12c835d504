import json

import pytest

from tempont.cli import main


def run(argv, capsys=None):
    rc = main(argv)
    return rc


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_model_validate_bundled(capsys):
    assert run(["model", "validate", "bundled:hlf"]) == 0
    assert "well-formed" in capsys.readouterr().out


def test_model_validate_bad_file(workdir, capsys):
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({
        "name": "bad",
        "activities": [{
            "name": "F", "kind": "forked",
            "children": [{"name": "A"}, {"name": "B"}],
        }],
    }))
    assert run(["model", "validate", str(bad)]) == 1
    assert "W4" in capsys.readouterr().out


def test_model_validate_usage_error(workdir, capsys):
    missing = workdir / "nope.json"
    assert run(["model", "validate", str(missing)]) == 2
    assert "error" in capsys.readouterr().err


def test_model_expand_counts(workdir):
    out = workdir / "template.json"
    assert run(["model", "expand", "bundled:hlf", "--bindings", "E=2,V=3",
                "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["count"] == 5 + 13 * 2 + 10 * 3
    assert doc["schema_version"] == "1"


def test_infer_gap_report_zero_flags(workdir, capsys):
    import tempont.bundled as bundled

    stripped = workdir / "noflags.json"
    raw = json.loads(bundled.model_path("hlf").read_text())

    def strip(node):
        node.pop("measured", None)
        for k in node.get("children", []):
            strip(k)
    for a in raw["activities"]:
        strip(a)
    stripped.write_text(json.dumps(raw))
    assert run(["infer", str(stripped), "--out", str(workdir / "status.json")]) == 0
    out = capsys.readouterr().out
    assert "84 unobserved aspects" in out
    status = json.loads((workdir / "status.json").read_text())
    assert all(v == "unobserved" for v in status["status"].values())


def _simulate(workdir, scenario="roundtrip", traces=60, extra=()):
    config = json.loads(
        __import__("tempont.bundled", fromlist=["scenario_path"])
        .scenario_path(scenario).read_text())
    config["traces"] = traces
    cfg_path = workdir / "sim.json"
    cfg_path.write_text(json.dumps(config))
    rc = main(["simulate", "--model", "bundled:hlf", "--bindings", "E=1,V=1",
               "--config", str(cfg_path), "--out", str(workdir / "records.jsonl"),
               "--truth", str(workdir / "truth.json"), *extra])
    assert rc == 0
    return workdir / "records.jsonl"


def test_stage_chain_produces_artifacts(workdir):
    records = _simulate(workdir)
    assert run(["ingest", "--format", "jsonl", "--in", str(records),
                "--out", str(workdir / "bundles.json")]) == 0
    assert run(["check-completeness", "--model", "bundled:hlf",
                "--bindings", "E=1,V=1", "--bundles", str(workdir / "bundles.json"),
                "--out", str(workdir / "completeness.json")]) == 0
    assert run(["derive", "--model", "bundled:hlf", "--bindings", "E=1,V=1",
                "--bundles", str(workdir / "bundles.json"),
                "--out", str(workdir / "timelines.json"), "--reduce"]) == 0
    assert run(["check", "--model", "bundled:hlf",
                "--timelines", str(workdir / "timelines.json"),
                "--out", str(workdir / "findings.jsonl"),
                "--dist", str(workdir / "dist.csv")]) == 0
    completeness = json.loads((workdir / "completeness.json").read_text())
    assert completeness["aggregate"]["incomplete_traces"] == 0
    assert (workdir / "findings.jsonl").read_text() == ""
    assert (workdir / "dist.csv").read_text().startswith(
        "activity,aspect,path_a,path_b,bucket_us,count")


def test_derive_outputs_byte_identical(workdir):
    records = _simulate(workdir, traces=30)
    run(["ingest", "--in", str(records), "--out", str(workdir / "b.json")])
    for name in ("t1.json", "t2.json"):
        assert run(["derive", "--model", "bundled:hlf", "--bindings", "E=1,V=1",
                    "--bundles", str(workdir / "b.json"),
                    "--out", str(workdir / name)]) == 0
    assert (workdir / "t1.json").read_bytes() == (workdir / "t2.json").read_bytes()


def test_derive_jobs_parallel_matches_serial(workdir):
    records = _simulate(workdir, traces=24)
    run(["ingest", "--in", str(records), "--out", str(workdir / "b.json")])
    run(["derive", "--model", "bundled:hlf", "--bindings", "E=1,V=1",
         "--bundles", str(workdir / "b.json"), "--out", str(workdir / "serial.json")])
    run(["derive", "--model", "bundled:hlf", "--bindings", "E=1,V=1",
         "--bundles", str(workdir / "b.json"), "--jobs", "3",
         "--out", str(workdir / "parallel.json")])
    assert (workdir / "serial.json").read_bytes() == (workdir / "parallel.json").read_bytes()


def test_epsilon_env_override(workdir, monkeypatch, capsys):
    records = _simulate(workdir, traces=40)
    run(["ingest", "--in", str(records), "--out", str(workdir / "b.json")])
    run(["derive", "--model", "bundled:hlf", "--bindings", "E=1,V=1",
         "--bundles", str(workdir / "b.json"), "--out", str(workdir / "t.json")])
    monkeypatch.setenv("TEMPONT_EPSILON_US", "7777")
    run(["check", "--model", "bundled:hlf", "--timelines", str(workdir / "t.json"),
         "--out", str(workdir / "f.jsonl")])
    assert "epsilon 7777 us" in capsys.readouterr().err


def test_drill_series_csv(workdir, capsys):
    records = _simulate(workdir, "spike-demo", traces=120)
    run(["ingest", "--in", str(records), "--out", str(workdir / "b.json")])
    run(["derive", "--model", "bundled:hlf", "--bindings", "E=1,V=1", "--reduce",
         "--bundles", str(workdir / "b.json"), "--out", str(workdir / "t.json")])
    assert run(["drill", "--model", "bundled:hlf",
                "--timelines", str(workdir / "t.json"),
                "--series", "Transaction processing",
                "--series-out", str(workdir / "root.csv")]) == 0
    lines = (workdir / "root.csv").read_text().strip().splitlines()
    assert lines[0] == "t_us,duration_us,tid"
    assert len(lines) == 121


def test_pipeline_demo_manifest(workdir, capsys):
    import tempont.bundled as bundled

    manifest = json.loads(bundled.scenario_path("demo-manifest").read_text())
    # shrink for test runtime; keep the spike window inside the span
    sim = json.loads(bundled.scenario_path("spike-demo").read_text())
    sim["traces"] = 250
    (workdir / "sim.json").write_text(json.dumps(sim))
    manifest["sim_config"] = str(workdir / "sim.json")
    manifest["figures"] = True
    (workdir / "manifest.json").write_text(json.dumps(manifest))

    rc = run(["pipeline", "--manifest", str(workdir / "manifest.json"),
              "--out-dir", str(workdir / "out")])
    assert rc == 1  # drill implicates bottleneck leaves
    out = capsys.readouterr()
    drill_doc = json.loads((workdir / "out" / "drill.json").read_text())
    leaves = []

    def collect(node):
        if node["verdict"] == "Leaf-Implicated":
            leaves.append(node["path"].rsplit("/", 1)[-1])
        for c in node.get("children", []):
            collect(c)
    collect(drill_doc["tree"])
    assert sorted(leaves) == ["Block commit", "Block inclusion"]
    run_manifest = json.loads((workdir / "out" / "run-manifest.json").read_text())
    assert set(run_manifest["artifacts"]) >= {
        "records", "bundles", "timelines", "findings", "drill", "infer"}
    figures = workdir / "out" / "figures"
    assert (figures / "drill_series.png").stat().st_size > 0
    assert (workdir / "out" / "distributions.csv").exists()


def test_drill_explicit_window(workdir, capsys):
    records = _simulate(workdir, "spike-demo", traces=220)
    run(["ingest", "--in", str(records), "--out", str(workdir / "b.json")])
    run(["derive", "--model", "bundled:hlf", "--bindings", "E=1,V=1", "--reduce",
         "--bundles", str(workdir / "b.json"), "--out", str(workdir / "t.json")])
    rc = run(["drill", "--model", "bundled:hlf",
              "--timelines", str(workdir / "t.json"),
              "--root", "Transaction processing",
              "--window", "180000000:228000000",
              "--out", str(workdir / "drill.json")])
    assert rc == 1
    doc = json.loads((workdir / "drill.json").read_text())
    assert doc["window"] == {"start_us": 180000000, "end_us": 228000000,
                             "low_confidence": False}
    assert "Implicated" in capsys.readouterr().out


def test_check_exit_one_on_error_findings(workdir):
    records = _simulate(workdir, "missing-subactivity", traces=40)
    run(["ingest", "--in", str(records), "--out", str(workdir / "b.json")])
    raw = json.loads(
        __import__("tempont.bundled", fromlist=["model_path"])
        .model_path("hlf").read_text())

    def strip(node):
        node["children"] = [k for k in node.get("children", [])
                            if k["name"] != "Commit history"]
        for k in node["children"]:
            strip(k)
        if not node["children"]:
            node.pop("children")
    for a in raw["activities"]:
        strip(a)
    variant = workdir / "hlf3.json"
    variant.write_text(json.dumps(raw))
    run(["derive", "--model", str(variant), "--bindings", "E=1,V=1",
         "--bundles", str(workdir / "b.json"), "--out", str(workdir / "t.json")])
    # 2-6 ms mismatches pass 10x threshold once epsilon tightens to 100 us
    rc = run(["check", "--model", str(variant),
              "--timelines", str(workdir / "t.json"), "--eps", "100",
              "--out", str(workdir / "f.jsonl")])
    assert rc == 1
    findings = [json.loads(line) for line in
                (workdir / "f.jsonl").read_text().splitlines()]
    assert any(f["severity"] == "error" for f in findings)


def test_check_figures_rendered(workdir):
    records = _simulate(workdir, "missing-subactivity", traces=50)
    run(["ingest", "--in", str(records), "--out", str(workdir / "b.json")])
    # analyze against the 3-subactivity variant to force mismatches
    raw = json.loads(
        __import__("tempont.bundled", fromlist=["model_path"])
        .model_path("hlf").read_text())

    def strip(node):
        node["children"] = [k for k in node.get("children", [])
                            if k["name"] != "Commit history"]
        for k in node["children"]:
            strip(k)
        if not node["children"]:
            node.pop("children")
    for a in raw["activities"]:
        strip(a)
    variant = workdir / "hlf3.json"
    variant.write_text(json.dumps(raw))
    run(["derive", "--model", str(variant), "--bindings", "E=1,V=1",
         "--bundles", str(workdir / "b.json"), "--out", str(workdir / "t.json")])
    rc = run(["check", "--model", str(variant),
              "--timelines", str(workdir / "t.json"),
              "--out", str(workdir / "f.jsonl"),
              "--dist", str(workdir / "d.csv"),
              "--figures", str(workdir / "figs")])
    assert rc == 0  # mismatches in the 2-6 ms range stay below 10x epsilon
    assert (workdir / "figs" / "mismatch_histograms.png").stat().st_size > 0
    findings = [json.loads(line) for line in
                (workdir / "f.jsonl").read_text().splitlines()]
    assert any(f["kind"] == "MultiPathMismatch" for f in findings)
