# ==================================================
# File: report_writer.py
# Schema-checked metrics stream and evaluation report
# ==================================================

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, TextIO, Union

import jsonschema
from typing_extensions import TypedDict

from artifact_store import atomic_write_text
from metrics import EvalResult

logger = logging.getLogger(__name__)


class EpochRecord(TypedDict):
    epoch: int
    stage: int
    loss_total: float
    loss_cls: float
    loss_contrastive: float
    sigma1: float
    sigma2: float
    wall_time_s: float


_NUMBER = {"type": "number"}

EPOCH_SCHEMA = {
    "type": "object",
    "required": list(EpochRecord.__annotations__),
    "properties": {
        "epoch": {"type": "integer", "minimum": 0},
        "stage": {"type": "integer", "enum": [1, 2]},
        "loss_total": _NUMBER,
        "loss_cls": _NUMBER,
        "loss_contrastive": _NUMBER,
        "sigma1": {"type": "number", "exclusiveMinimum": 0},
        "sigma2": {"type": "number", "exclusiveMinimum": 0},
        "wall_time_s": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

EVALUATION_SCHEMA = {
    "type": "object",
    "required": ["config", "summary", "per_slide"],
    "properties": {
        "config": {"type": "string"},
        "summary": {
            "type": "object",
            "required": ["auc", "weighted_f1", "confusion"],
            "properties": {
                "auc": {"type": "number", "minimum": 0, "maximum": 1},
                "weighted_f1": {"type": "number", "minimum": 0, "maximum": 1},
                "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                "per_class_f1": {"type": "array", "items": _NUMBER},
                "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
            },
        },
        "per_slide": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["slide_id", "label", "predicted", "score"],
                "properties": {
                    "slide_id": {"type": "string"},
                    "label": {"type": "integer"},
                    "predicted": {"type": "integer"},
                    "score": _NUMBER,
                },
            },
        },
    },
}


class MetricsLogWriter:
    """JSON-lines epoch records to stdout or an append-only file"""

    def __init__(self, path: Optional[Union[str, Path]] = None, stream: Optional[TextIO] = None):
        self.path = Path(path) if path else None
        self.stream = stream if stream is not None else (None if self.path else sys.stdout)
        self.records: List[Dict[str, Any]] = []

    def write(self, record: Dict[str, Any]):
        jsonschema.validate(record, EPOCH_SCHEMA)
        line = json.dumps(record, sort_keys=True)
        self.records.append(record)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(line + "\n")
        else:
            self.stream.write(line + "\n")
            self.stream.flush()


def evaluation_report(result: EvalResult, config_echo: str) -> Dict[str, Any]:
    rows = []
    for row in result.per_slide.itertuples(index=False):
        rows.append({
            'slide_id': str(row.slide_id),
            'label': int(row.label),
            'predicted': int(row.predicted),
            'score': float(row.score),
        })
    report = {
        'config': config_echo,
        'summary': result.summary(),
        'per_slide': rows,
    }
    jsonschema.validate(report, EVALUATION_SCHEMA)
    return report


def write_evaluation(path: Union[str, Path], result: EvalResult, config_echo: str) -> Dict[str, Any]:
    report = evaluation_report(result, config_echo)
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    logger.info("evaluation_written path=%s", path)
    return report
