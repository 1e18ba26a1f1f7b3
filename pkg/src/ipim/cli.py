"""Command-line entry point: ``ipim run`` and ``ipim report``."""

from __future__ import annotations

import argparse
import json
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Optional

from . import __version__
from . import scenario as sc
from .netsim import DanglingReferenceError, Trace, TraceParseError
from .schema import SCENARIO, SchemaError

EXIT_OK = 0
EXIT_IO = 1
EXIT_SCHEMA = 2
EXIT_ASSERTION = 3
EXIT_PARSE = 4


def _versions() -> dict:
    try:
        js = metadata.version("jsonschema")
    except metadata.PackageNotFoundError:
        js = "unknown"
    return {"ipim": __version__, "python": platform.python_version(), "jsonschema": js}


def cmd_run(args: argparse.Namespace) -> int:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.horizon is not None:
        overrides.append(f"horizon_us={args.horizon}")
    try:
        text = sc.read_scenario_text(args.scenario)
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        doc = sc.load_scenario(text, overrides)
        result = sc.run_scenario(doc)
    except SchemaError as exc:
        print(f"SCHEMA_ERROR {exc.path}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except DanglingReferenceError as exc:
        print(f"DANGLING_REFERENCE {exc}", file=sys.stderr)
        return EXIT_SCHEMA

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trace.write(out / "trace.jsonl")
    render, name = sc.RENDERERS[args.format]
    (out / name).write_text(render(result.rows), encoding="utf-8")
    manifest = {
        "scenario": args.scenario,
        "scenario_sha256": sc.scenario_digest(text),
        "overrides": overrides,
        "seed": doc["seed"],
        "horizon_us": doc["horizon_us"],
        "versions": _versions(),
        "artifacts": {"trace": "trace.jsonl", "report": name},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    failures = sc.check_expectations(result.rows, doc.get("expect", []))
    for msg in failures:
        print(f"ASSERTION_FAILED {msg}", file=sys.stderr)
    if failures:
        return EXIT_ASSERTION
    print(f"ok: {len(result.trace)} events, {len(doc.get('expect', []))} expectations met -> {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        trace = Trace.read(args.trace)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TraceParseError as exc:
        print(f"PARSE_ERROR line {exc.line}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        rows = sc.build_report(trace, args.window)
    except ValueError as exc:
        print(f"PARSE_ERROR {exc}", file=sys.stderr)
        return EXIT_PARSE
    render, _ = sc.RENDERERS[args.format]
    text = render(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_scenarios(args: argparse.Namespace) -> int:
    for name in sc.bundled_names():
        print(name)
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    print(json.dumps(SCENARIO, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipim", description="In-protocol measurement simulator and analyser")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write trace, report and manifest")
    r.add_argument("scenario", help="scenario file or bundled scenario name")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--horizon", type=int, metavar="US", help="override horizon_us")
    r.add_argument("--out-dir", default="ipim-out")
    r.add_argument("--format", choices=sorted(sc.RENDERERS), default="structured")
    r.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted-path override, value parsed as JSON when possible")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="analyse an existing trace file")
    rep.add_argument("trace")
    rep.add_argument("--format", choices=sorted(sc.RENDERERS), default="structured")
    rep.add_argument("--window", type=int, default=3, help="nonce loss window")
    rep.add_argument("--out", help="write here instead of stdout")
    rep.set_defaults(func=cmd_report)

    sub.add_parser("scenarios", help="list bundled scenarios").set_defaults(func=cmd_scenarios)
    sub.add_parser("schema", help="print the scenario schema").set_defaults(func=cmd_schema)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
