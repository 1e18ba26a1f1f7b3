"""Scenario schema and validation.

Every duration key carries its unit in the name (``_us`` or ``_ms``); rates
are bits per second, sizes are bytes.
"""

from __future__ import annotations

from typing import Any

import jsonschema

_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_NAME = {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"}
_PRESENCE = {"enum": ["HOSTID", "TIMING", "NONCE", "INTEGRITY", "HOPREQ", "EVOLUTION", "ACCUM"]}
_FIELD_CLASS = {"enum": ["ADDRESSES", "PORTS", "TRANSPORT_HDR", "PAYLOAD", "IPIM_FIELDS"]}

ADVERSARY = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["NONE", "UNDERREPORT_OWN_QL", "INFLATE_VICTIM_QL", "NAT_REWRITE",
                          "NONCE_TAMPER", "HASH_RECOMPUTE"]},
        "scale": {"type": "number", "minimum": 0},
        "victim_as": {"type": "integer", "minimum": 0},
        "inflate_us": {"type": "integer", "minimum": 0},
        "victim_hops": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "addr_map": {"type": "object", "additionalProperties": {"type": "string"}},
        "port_map": {"type": "object", "additionalProperties": {"type": "integer"}},
        "nonce_delta": {"type": "integer"},
    },
}

NETWORK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["hosts", "links"],
    "properties": {
        "hosts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {
                    "name": _NAME,
                    "as": {"type": "integer", "minimum": 0},
                    "address": {"type": "string", "format": "ipv4"},
                    "clock_offset_us": {"type": "integer", "minimum": 0},
                },
            },
        },
        "routers": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "id", "as"],
                "properties": {
                    "name": _NAME,
                    "id": {"type": "integer", "minimum": 0, "maximum": 4294967295},
                    "as": {"type": "integer", "minimum": 0, "maximum": 4294967295},
                    "evolution_offset": {"type": "integer", "minimum": -32768, "maximum": 32767},
                    "stamp_probability": _PROB,
                    "clock_offset_us": {"type": "integer", "minimum": 0},
                    "background_load_bps": {"type": "integer", "minimum": 0},
                    "shed_threshold_us": {"type": "integer", "minimum": 0},
                    "features": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {
                            "stamping": {"type": "boolean"},
                            "evolution": {"type": "boolean"},
                            "accum": {"type": "boolean"},
                        },
                    },
                    "adversary": ADVERSARY,
                },
            },
        },
        "links": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["a", "b", "delay_us", "rate_bps"],
                "properties": {
                    "a": _NAME,
                    "b": _NAME,
                    "delay_us": {"type": "integer", "exclusiveMinimum": 0},
                    "rate_bps": {"type": "integer", "exclusiveMinimum": 0},
                    "queue_bytes": {"type": "integer", "minimum": 1},
                    "loss": _PROB,
                    "reorder": _PROB,
                    "reorder_delay_us": {"type": "integer", "minimum": 0},
                    "duplicate": _PROB,
                },
            },
        },
        "routes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["src", "dst", "path"],
                "properties": {"src": _NAME, "dst": _NAME, "path": {"type": "array", "items": _NAME}},
            },
        },
        "route_changes": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["time_us", "src", "dst", "path"],
                "properties": {
                    "time_us": {"type": "integer", "minimum": 0},
                    "src": _NAME,
                    "dst": _NAME,
                    "path": {"type": "array", "items": _NAME},
                },
            },
        },
    },
}

FLOW = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "src", "dst", "count", "interval_us"],
    "properties": {
        "id": _NAME,
        "src": _NAME,
        "dst": _NAME,
        "count": {"type": "integer", "minimum": 0},
        "interval_us": {"type": "integer", "minimum": 1},
        "start_us": {"type": "integer", "minimum": 0},
        "size_bytes": {"type": "integer", "minimum": 1},
        "ttl": {"type": "integer", "minimum": 1, "maximum": 255},
        "sport": {"type": "integer", "minimum": 0, "maximum": 65535},
        "dport": {"type": "integer", "minimum": 0, "maximum": 65535},
        "granularity": {"type": "integer", "minimum": 0, "maximum": 3},
        "presence": {"type": "array", "items": _PRESENCE, "uniqueItems": True},
        "hop_request": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kinds", "strategy"],
            "properties": {
                "kinds": {"type": "array", "minItems": 1, "items": {"enum": ["TOPOLOGY", "PERFORMANCE"]}},
                "strategy": {"enum": ["PROBABILISTIC", "TRIGGERED"]},
                "target_ttls": {"type": "array", "minItems": 1,
                                "items": {"type": "integer", "minimum": 0, "maximum": 255}},
            },
        },
        "integrity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["PLAIN", "SENDER_SALT", "SHARED_SALT"]},
                "salt_hex": {"type": "string", "pattern": "^([0-9a-fA-F]{2})*$"},
                "covers": {"type": "array", "minItems": 1,
                           "items": {"type": "array", "items": _FIELD_CLASS, "uniqueItems": True}},
            },
        },
        "ack": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["fixed", "delayed"]},
                "hold_us": {"type": "integer", "minimum": 0},
                "every": {"type": "integer", "minimum": 1},
                "size_bytes": {"type": "integer", "minimum": 1},
            },
        },
        "nonce_values": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 4294967295}},
        "ack_nonce_values": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 4294967295}},
        "window": {"type": "integer", "minimum": 1},
        "script": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "drop_seqs": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "extra_delay_us": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
            },
        },
    },
}

SCENARIO = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "IPIM simulation scenario",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "horizon_us", "network", "workload"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 18446744073709551615},
        "horizon_us": {"type": "integer", "exclusiveMinimum": 0},
        "network": NETWORK,
        "workload": {
            "type": "object",
            "additionalProperties": False,
            "required": ["flows"],
            "properties": {"flows": {"type": "array", "items": FLOW}},
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "window": {"type": "integer", "minimum": 1},
                "ql_mismatch_fraction": {"type": "number", "minimum": 0},
                "median_shift_us": {"type": "integer", "minimum": 0},
                "min_samples": {"type": "integer", "minimum": 1},
                "floor_us": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
            },
        },
        "expect": {"type": "array", "items": {"type": "object", "required": ["check"]}},
    },
}


class SchemaError(ValueError):
    """Scenario content does not match the schema; ``path`` names the field."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


def field_path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate(instance: Any, schema: dict = SCENARIO, prefix: tuple = ()) -> None:
    validator = jsonschema.Draft202012Validator(schema, format_checker=jsonschema.Draft202012Validator.FORMAT_CHECKER)
    errors = sorted(validator.iter_errors(instance), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise SchemaError(field_path(prefix + tuple(err.absolute_path)), err.message)
