"""Scenario files: loading, overrides, running, reporting and expectations."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from . import schema
from .analysis import (
    DiscrepancyParams,
    EmptySeriesError,
    InsufficientDataError,
    arrival_report,
    build_topology_map,
    detect_path_change,
    discrepancy_check,
    evolution_series,
    integrity_history,
    latency_series,
    participation_series,
)
from .integrity import localize_mutation
from .netsim import Network, Simulator, Trace, build_network, parse_workload
from .wire import FieldClass

REPORT_COLUMNS = ("section", "flow", "index", "key", "value")


class AssertionFailed(Exception):
    """A scenario-embedded expectation did not hold."""


def bundled_names() -> list[str]:
    root = resources.files("ipim") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def read_scenario_text(ref: str) -> str:
    """Read a scenario from a path, or by bundled name."""
    path = Path(ref)
    if path.exists():
        return path.read_text(encoding="utf-8")
    if ref in bundled_names():
        return (resources.files("ipim") / "scenarios" / f"{ref}.json").read_text(encoding="utf-8")
    raise FileNotFoundError(f"no scenario file or bundled scenario named {ref!r}")


def parse_override(text: str) -> tuple[list, Any]:
    if "=" not in text:
        raise schema.SchemaError("--override", f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts: list = [int(p) if p.isdigit() else p for p in key.split(".")]
    return parts, value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides:
        parts, value = parse_override(text)
        node = doc
        for depth, p in enumerate(parts[:-1]):
            try:
                node = node[p]
            except (KeyError, IndexError, TypeError):
                raise schema.SchemaError(schema.field_path(parts[: depth + 1]), "override path does not exist") from None
        try:
            node[parts[-1]] = value
        except (IndexError, TypeError):
            raise schema.SchemaError(schema.field_path(parts), "override path does not exist") from None
    return doc


def load_scenario(text: str, overrides: Optional[list[str]] = None) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise schema.SchemaError("$", f"not valid JSON (line {exc.lineno}: {exc.msg})") from None
    doc = apply_overrides(doc, overrides or [])
    schema.validate(doc)
    return doc


@dataclass
class RunResult:
    scenario: dict
    network: Network
    simulator: Simulator
    trace: Trace
    rows: list[dict] = field(default_factory=list)


def analysis_params(doc: dict) -> tuple[int, DiscrepancyParams]:
    a = doc.get("analysis", {})
    params = DiscrepancyParams()
    for key in ("ql_mismatch_fraction", "median_shift_us", "min_samples", "floor_us"):
        if key in a:
            setattr(params, key, a[key])
    return a.get("window", 3), params


def run_scenario(doc: dict) -> RunResult:
    net = build_network(doc["network"], doc["seed"])
    flows = parse_workload(doc["workload"]["flows"], net)
    sim = Simulator(net, flows, doc["seed"], doc["horizon_us"])
    trace = sim.run()
    window, params = analysis_params(doc)
    return RunResult(doc, net, sim, trace, build_report(trace, window, params))


# -- report ------------------------------------------------------------------


def _row(section: str, flow: str, index: int, key: str, value: Any) -> dict:
    if isinstance(value, float):
        value = round(value, 6)
    return {"section": section, "flow": flow, "index": index, "key": key, "value": value}


def build_report(trace: Trace, window: int = 3, params: Optional[DiscrepancyParams] = None) -> list[dict]:
    rows: list[dict] = []
    flows = trace.flows()
    for flow in flows:
        try:
            series = latency_series(trace, flow)
        except (EmptySeriesError, ValueError):
            series = []
        for i, d in enumerate(series):
            rows += [
                _row("latency", flow, i, "feedback", d.feedback_time),
                _row("latency", flow, i, "host", d.host_delay),
                _row("latency", flow, i, "network", d.network_delay),
                _row("latency", flow, i, "unit_us", d.unit_us),
            ]

        report, inconsistencies = arrival_report(trace, flow, window=window)
        if report.arrived or report.lost_candidates or report.ambiguous or inconsistencies:
            for key, values in (("arrived", report.arrived), ("lost_candidate", report.lost_candidates),
                                ("ambiguous", report.ambiguous)):
                rows += [_row("arrivals", flow, i, key, v) for i, v in enumerate(values)]
            for i, (earlier, later) in enumerate(report.reordered):
                rows += [_row("arrivals", flow, i, "reordered_earlier", earlier),
                         _row("arrivals", flow, i, "reordered_later", later)]
            rows += [_row("arrivals", flow, 0, "acks_in_order", int(report.acks_in_order)),
                     _row("arrivals", flow, 0, "inconsistencies", inconsistencies)]

        evo = evolution_series(trace, flow)
        if evo:
            changes = detect_path_change(evo)
            rows += [_row("path_change", flow, 0, "signatures", len(evo)),
                     _row("path_change", flow, 0, "changes", len(changes))]
            for i, c in enumerate(changes):
                rows += [_row("path_change", flow, i, "time_us", c.time),
                         _row("path_change", flow, i, "old", c.old),
                         _row("path_change", flow, i, "new", c.new)]

        part = participation_series(trace, flow)
        if part:
            complete = sum(1 for *_, ok in part if ok)
            rows += [_row("participation", flow, 0, "checks", len(part)),
                     _row("participation", flow, 0, "complete", complete),
                     _row("participation", flow, 0, "incomplete", len(part) - complete)]

        history = integrity_history(trace, flow)
        if history:
            verdict = localize_mutation(history)
            rows += [_row("integrity", flow, 0, "verdicts", len(history)),
                     _row("integrity", flow, 0, "mismatches", sum(1 for _, ok in history if not ok))]
            for key, classes in (("mutated", verdict.mutated), ("intact", verdict.intact)):
                names = sorted(FieldClass(c).name for c in classes)
                rows += [_row("integrity", flow, i, key, n) for i, n in enumerate(names)]

    if not flows:
        return rows
    topo = build_topology_map(trace)
    rows.append(_row("topology", "", 0, "routers", len(topo.routers)))
    rows.append(_row("topology", "", 0, "conflicts", len(topo.conflicts)))
    for rid in sorted(topo.routers):
        entry = topo.routers[rid]
        rows.append(_row("topology", "", rid, "as", entry.as_number))
        rows += [_row("topology", "", rid, "interface", a) for a in sorted(entry.interfaces)]
        rows += [_row("topology", "", rid, "stamped_ttl", t) for t in sorted(entry.stamped_ttls)]
    for (flow, kind), path in sorted(topo.as_path_estimates.items()):
        for i, (ttl, asn, conf) in enumerate(path):
            rows += [_row("as_path", f"{flow}/{kind}", i, "ttl", ttl),
                     _row("as_path", f"{flow}/{kind}", i, "as", asn),
                     _row("as_path", f"{flow}/{kind}", i, "confidence", conf)]

    try:
        disc = discrepancy_check(trace, params)
        rows.append(_row("discrepancy", "", 0, "flags", len(disc.flagged)))
        for i, f in enumerate(disc.flagged):
            rows += [_row("discrepancy", "", i, "subject", f.subject),
                     _row("discrepancy", "", i, "kind", f.kind),
                     _row("discrepancy", "", i, "magnitude", f.magnitude),
                     _row("discrepancy", "", i, "samples", f.samples)]
    except InsufficientDataError:
        rows.append(_row("discrepancy", "", 0, "status", "INSUFFICIENT_DATA"))
    return rows


def render_structured(rows: list[dict]) -> str:
    return json.dumps({"columns": list(REPORT_COLUMNS), "rows": rows}, indent=1, sort_keys=True) + "\n"


def render_tabular(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r[c] for c in REPORT_COLUMNS])
    return buf.getvalue()


def parse_tabular(text: str) -> list[dict]:
    """Inverse of render_tabular, restoring numeric cells."""

    def cell(s: str) -> Any:
        for conv in (int, float):
            try:
                return conv(s)
            except ValueError:
                pass
        return s

    reader = csv.DictReader(io.StringIO(text))
    return [
        {"section": r["section"], "flow": r["flow"], "index": int(r["index"]), "key": r["key"], "value": cell(r["value"])}
        for r in reader
    ]


RENDERERS = {"structured": (render_structured, "report.json"), "tabular": (render_tabular, "report.csv")}


# -- expectations ---------------------------------------------------------------


def _matching(rows: list[dict], exp: dict) -> list[dict]:
    return [r for r in rows if all(r[k] == exp[k] for k in ("section", "flow", "index", "key") if k in exp)]


def _compare(value: Any, exp: dict) -> bool:
    if "equals" in exp and value != exp["equals"]:
        return False
    if "min" in exp and not value >= exp["min"]:
        return False
    if "max" in exp and not value <= exp["max"]:
        return False
    return True


def check_expectations(rows: list[dict], expectations: list[dict]) -> list[str]:
    """Return one message per unmet expectation.

    ``row``: every matching row satisfies equals/min/max (and one exists);
    ``some``: at least one matching row does;
    ``count``: the number of matching rows satisfies equals/min/max;
    ``values``: the matching rows' values, in order, equal ``equals``.
    """
    failures = []
    for i, exp in enumerate(expectations):
        matched = _matching(rows, exp)
        kind = exp["check"]
        if kind == "row":
            ok = bool(matched) and all(_compare(r["value"], exp) for r in matched)
            got = [r["value"] for r in matched]
        elif kind == "some":
            ok = any(_compare(r["value"], exp) for r in matched)
            got = [r["value"] for r in matched]
        elif kind == "count":
            ok = _compare(len(matched), exp)
            got = len(matched)
        elif kind == "values":
            got = [r["value"] for r in matched]
            ok = got == exp["equals"]
        else:
            failures.append(f"expect[{i}]: unknown check {kind!r}")
            continue
        if not ok:
            failures.append(f"expect[{i}] {json.dumps(exp, sort_keys=True)}: got {got}")
    return failures


def scenario_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
