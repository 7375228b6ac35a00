"""JSON schemas for config inputs and the report envelope."""
from __future__ import annotations

import jsonschema

REPORT_SCHEMA_VERSION = "uspsim.report/1"

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

MODEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ModelConfig",
    "type": "object",
    "additionalProperties": False,
    "required": ["seqlen", "hidden", "heads"],
    "properties": {
        "seqlen": _pos_int,
        "hidden": _pos_int,
        "heads": _pos_int,
        "kv_heads": _pos_int,
        "batch": _pos_int,
        "layers": _pos_int,
        "dtype_bytes": _pos_int,
        "param_formula": {"enum": ["gpt", "custom"]},
        "params_per_block": _pos_int,
        "act_multiplier": _pos_num,
        "tp_act_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
}

CLUSTER_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ClusterConfig",
    "type": "object",
    "additionalProperties": False,
    "required": ["devices", "devices_per_node", "intra_bw", "inter_bw", "device_memory"],
    "properties": {
        "devices": _pos_int,
        "devices_per_node": _pos_int,
        "intra_bw": _pos_num,
        "inter_bw": _pos_num,
        "device_memory": _pos_num,
        "latency": {"type": "number", "minimum": 0},
        "overlap_budget": {"type": "number", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RunReport",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema", "command", "config_digest", "results", "exit_status"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_VERSION},
        "command": {"type": "array", "items": {"type": "string"}},
        "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "results": {"type": "object"},
        "exit_status": {"enum": [0, 1, 2]},
    },
}


class ConfigError(ValueError):
    pass


def validate(doc, schema, source: str = "<config>") -> None:
    """Raise ConfigError listing every violation as ``source:path: message``."""
    v = jsonschema.Draft202012Validator(schema)
    errors = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            path = "/".join(str(p) for p in e.absolute_path) or "(root)"
            lines.append(f"{source}:{path}: {e.message}")
        raise ConfigError("\n".join(lines))
