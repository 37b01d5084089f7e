"""Deterministic JSON serialisation of reports."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

SCHEMA_DIR = Path(__file__).with_name("schemas")


def to_jsonable(obj):
    """Plain JSON types; NaN and infinities become ``None``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    """Sorted-key, indented JSON with a trailing newline."""
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_schema(name: str = "report") -> dict:
    return json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())
