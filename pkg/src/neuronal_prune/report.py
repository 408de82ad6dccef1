"""PruneReport: the JSON record written by ``prune``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import jsonschema

TOPUP_TAGS = ("uniform", "linear", "exp", "log", "owl", "neuronal", "neuronal-block")

_NUM = {"type": "number"}
_FRACTION = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "PruneReport",
    "type": "object",
    "required": [
        "scorer_tag",
        "topup_tag",
        "target_sparsity",
        "chosen_lambda_block",
        "chosen_lambda_row",
        "candidate_alignments",
        "per_block_sparsity",
        "achieved_global_sparsity",
        "achieved",
        "alignment",
        "perplexity",
        "seq_len",
        "calib_windows",
        "seeds",
        "paths",
        "timestamp",
    ],
    "properties": {
        "scorer_tag": {"enum": ["magnitude", "wanda"]},
        "topup_tag": {"enum": list(TOPUP_TAGS)},
        "target_sparsity": _FRACTION,
        "chosen_lambda_block": {"type": ["number", "null"], "minimum": 0},
        "chosen_lambda_row": {"type": ["number", "null"], "minimum": 0},
        "candidate_alignments": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["stage", "lambda", "alignment"],
                "properties": {
                    "stage": {"enum": ["block", "row", "fixed"]},
                    "lambda": {"type": "number", "minimum": 0},
                    "alignment": {"type": "number", "minimum": 0},
                },
                "additionalProperties": False,
            },
        },
        "per_block_sparsity": {"type": "array", "items": _FRACTION},
        "per_row_sparsity": {
            "type": ["object", "null"],
            "additionalProperties": {"type": "array", "items": _FRACTION},
        },
        "achieved_global_sparsity": _FRACTION,
        "achieved": {
            "type": "object",
            "required": ["global", "per_block", "per_layer"],
            "properties": {
                "global": _FRACTION,
                "per_block": {"type": "array", "items": _FRACTION},
                "per_layer": {"type": "object", "additionalProperties": _FRACTION},
            },
        },
        "alignment": {"type": ["number", "null"], "minimum": 0},
        "block_alignment": {"type": ["number", "null"], "minimum": 0},
        "perplexity": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "seq_len": {"type": "integer", "minimum": 1},
        "calib_windows": {"type": "integer", "minimum": 1},
        "seeds": {"type": "object", "additionalProperties": {"type": ["integer", "null"]}},
        "paths": {"type": "object", "additionalProperties": {"type": ["string", "null"]}},
        "timestamp": {"type": "string"},
    },
}


@dataclass
class PruneReport:
    scorer_tag: str
    topup_tag: str
    target_sparsity: float
    chosen_lambda_block: float | None
    chosen_lambda_row: float | None
    candidate_alignments: list
    per_block_sparsity: list
    achieved_global_sparsity: float
    achieved: dict
    alignment: float | None = None
    block_alignment: float | None = None
    per_row_sparsity: dict | None = None
    perplexity: float | None = None
    seq_len: int = 64
    calib_windows: int = 8
    seeds: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def to_dict(self, include_timestamp=True):
        out = asdict(self)
        if not include_timestamp:
            out.pop("timestamp")
        return out

    def to_json(self, include_timestamp=True):
        return json.dumps(self.to_dict(include_timestamp), indent=2) + "\n"

    def candidates(self, stage):
        return [(c["lambda"], c["alignment"]) for c in self.candidate_alignments if c["stage"] == stage]


def validate_report(data):
    """Raise ``jsonschema.ValidationError`` if ``data`` does not match the schema."""
    jsonschema.validate(data, REPORT_SCHEMA)
