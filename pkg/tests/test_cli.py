import json
import subprocess
import sys

import pytest

from ipim.cli import EXIT_ASSERTION, EXIT_IO, EXIT_OK, EXIT_PARSE, EXIT_SCHEMA, main
from ipim.scenario import bundled_names, parse_tabular, read_scenario_text, scenario_digest

REQUIRED = {"timing_example", "nonce_example", "stamping_coverage", "path_change",
            "participation", "nat_integrity", "adversary_ql"}


def report_rows(path):
    return json.loads(path.read_text())["rows"]


def test_required_scenarios_are_bundled():
    assert REQUIRED <= set(bundled_names())


@pytest.mark.parametrize("name", bundled_names())
def test_bundled_scenario_passes(name, tmp_path):
    assert main(["run", name, "--out-dir", str(tmp_path)]) == EXIT_OK
    assert {p.name for p in tmp_path.iterdir()} == {"trace.jsonl", "report.json", "manifest.json"}


def test_timing_example_report(tmp_path):
    main(["run", "timing_example", "--out-dir", str(tmp_path)])
    got = {r["key"]: r["value"] for r in report_rows(tmp_path / "report.json") if r["section"] == "latency"}
    assert (got["feedback"], got["network"], got["host"]) == (50, 35, 15)


def test_nonce_example_report(tmp_path):
    main(["run", "nonce_example", "--out-dir", str(tmp_path)])
    rows = [r for r in report_rows(tmp_path / "report.json") if r["section"] == "arrivals"]
    pick = lambda key: [r["value"] for r in rows if r["key"] == key]
    assert pick("arrived") == [5800, 5]
    assert pick("lost_candidate") == [1001]
    assert pick("reordered_earlier") == [5] and pick("reordered_later") == [5800]
    assert pick("acks_in_order") == [1]


def test_seed_flag_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "stamping_coverage", "--seed", "7", "--out-dir", str(a)]) == EXIT_OK
    assert main(["run", "stamping_coverage", "--seed", "7", "--out-dir", str(b)]) == EXIT_OK
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_manifest_regenerates_run(tmp_path):
    assert main(["run", "participation", "--seed", "9", "--horizon", "60000", "--out-dir", str(tmp_path / "a")]) == EXIT_OK
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["scenario_sha256"] == scenario_digest(read_scenario_text("participation"))
    assert manifest["seed"] == 9 and manifest["horizon_us"] == 60000
    assert set(manifest["versions"]) == {"ipim", "python", "jsonschema"}
    again = ["run", manifest["scenario"], "--out-dir", str(tmp_path / "b")]
    for o in manifest["overrides"]:
        again += ["--override", o]
    assert main(again) == EXIT_OK
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() == (tmp_path / "b" / "trace.jsonl").read_bytes()


def test_malformed_scenario_names_field(tmp_path, capsys):
    doc = json.loads(read_scenario_text("timing_example"))
    doc["network"]["links"][0]["rate_bps"] = "fast"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["run", str(path), "--out-dir", str(tmp_path / "out")]) == EXIT_SCHEMA
    assert "$.network.links[0].rate_bps" in capsys.readouterr().err


def test_missing_seed_is_schema_error(tmp_path, capsys):
    doc = json.loads(read_scenario_text("timing_example"))
    del doc["seed"]
    path = tmp_path / "noseed.json"
    path.write_text(json.dumps(doc))
    assert main(["run", str(path), "--out-dir", str(tmp_path / "out")]) == EXIT_SCHEMA
    assert "seed" in capsys.readouterr().err


def test_invalid_json_is_schema_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{")
    assert main(["run", str(path), "--out-dir", str(tmp_path / "out")]) == EXIT_SCHEMA


def test_dangling_reference_exit(tmp_path, capsys):
    rc = main(["run", "path_change", "--out-dir", str(tmp_path),
               "--override", 'network.routes.0.path=["R1", "R7"]'])
    assert rc == EXIT_SCHEMA and "DANGLING_REFERENCE" in capsys.readouterr().err


def test_bad_override_path(tmp_path, capsys):
    rc = main(["run", "timing_example", "--out-dir", str(tmp_path), "--override", "network.nope.x=1"])
    assert rc == EXIT_SCHEMA and "$.network.nope" in capsys.readouterr().err


def test_unmet_expectation_exit(tmp_path, capsys):
    rc = main(["run", "timing_example", "--out-dir", str(tmp_path),
               "--override", "workload.flows.0.ack.hold_us=16"])
    assert rc == EXIT_ASSERTION and "ASSERTION_FAILED" in capsys.readouterr().err
    assert (tmp_path / "trace.jsonl").exists()


def test_missing_scenario_is_io_error(tmp_path):
    assert main(["run", str(tmp_path / "absent.json"), "--out-dir", str(tmp_path)]) == EXIT_IO
    assert main(["report", str(tmp_path / "absent.jsonl")]) == EXIT_IO


def test_empty_trace_report_has_no_rows(tmp_path):
    (tmp_path / "t.jsonl").write_text("")
    out = tmp_path / "r.json"
    assert main(["report", str(tmp_path / "t.jsonl"), "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["columns"] == ["section", "flow", "index", "key", "value"]
    assert doc["rows"] == []
    assert main(["report", str(tmp_path / "t.jsonl"), "--format", "tabular", "--out", str(out)]) == EXIT_OK
    assert out.read_text().strip() == "section,flow,index,key,value"


def test_parse_error_reports_line(tmp_path, capsys):
    good = tmp_path / "run"
    main(["run", "timing_example", "--out-dir", str(good)])
    lines = (good / "trace.jsonl").read_text().splitlines()
    lines.insert(2, '{"ev": "SEND", "t": ')
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["report", str(bad)]) == EXIT_PARSE
    assert "line 3" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["nonce_example", "stamping_coverage", "adversary_ql"])
def test_formats_carry_identical_content(name, tmp_path):
    main(["run", name, "--out-dir", str(tmp_path)])
    trace = str(tmp_path / "trace.jsonl")
    main(["report", trace, "--format", "structured", "--out", str(tmp_path / "r.json")])
    main(["report", trace, "--format", "tabular", "--out", str(tmp_path / "r.csv")])
    structured = report_rows(tmp_path / "r.json")
    assert parse_tabular((tmp_path / "r.csv").read_text()) == structured
    assert structured


def test_report_is_deterministic(tmp_path):
    main(["run", "participation", "--out-dir", str(tmp_path)])
    trace = str(tmp_path / "trace.jsonl")
    main(["report", trace, "--out", str(tmp_path / "1.json")])
    main(["report", trace, "--out", str(tmp_path / "2.json")])
    assert (tmp_path / "1.json").read_bytes() == (tmp_path / "2.json").read_bytes()


def test_console_script_lists_scenarios():
    out = subprocess.run([sys.executable, "-m", "ipim.cli", "scenarios"], capture_output=True, text=True, check=True)
    assert out.stdout.split() == bundled_names()


def test_schema_command_prints_json(capsys):
    assert main(["schema"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert {"seed", "horizon_us", "network", "workload"} <= set(doc["required"])
