"""
Utility functions and helpers for the anomaly clustering pipeline.

Validation helpers, strict value parsing for configuration files, table and
JSON writers, and the stage timer used by the run manifest.
"""

from typing import Dict, Any, List, Optional, Sequence
from pathlib import Path
import json
import logging
import time

import numpy as np
import pandas as pd

from constants import ParameterError, FormatError, DataError

logger = logging.getLogger(__name__)


# ============================================================================
# VALIDATION FUNCTIONS
# ============================================================================

def validate_positive(name: str, value: float) -> float:
    """Require a finite value > 0."""
    if value is None or not np.isfinite(value) or value <= 0:
        raise ParameterError(f"{name} must be a finite value > 0, got {value}")
    return value


def validate_count(name: str, value: int, minimum: int = 1) -> int:
    """Require an integer >= minimum."""
    if int(value) != value or value < minimum:
        raise ParameterError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


def validate_same_length(name_a: str, a: Sequence, name_b: str, b: Sequence) -> None:
    if len(a) != len(b):
        raise ParameterError(f"{name_a} and {name_b} differ in length: {len(a)} vs {len(b)}")


# ============================================================================
# VALUE PARSING
# ============================================================================

def parse_bool(text: str) -> bool:
    """Parse a boolean literal; anything unrecognized is an error."""
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ParameterError(f"not a boolean: {text!r}")


def parse_int(text: str) -> int:
    try:
        return int(text.strip().replace('_', ''))
    except (ValueError, TypeError):
        raise ParameterError(f"not an integer: {text!r}")


def parse_float(text: str) -> float:
    try:
        value = float(text.strip())
    except (ValueError, TypeError):
        raise ParameterError(f"not a number: {text!r}")
    if not np.isfinite(value):
        raise ParameterError(f"not a finite number: {text!r}")
    return value


def parse_float_list(text: str) -> List[float]:
    """Parse a comma-separated list of numbers."""
    parts = [part for part in text.split(',') if part.strip()]
    if not parts:
        raise ParameterError(f"empty list: {text!r}")
    return [parse_float(part) for part in parts]


def parse_int_list(text: str) -> List[int]:
    parts = [part for part in text.split(',') if part.strip()]
    if not parts:
        raise ParameterError(f"empty list: {text!r}")
    return [parse_int(part) for part in parts]


# ============================================================================
# FILE HELPERS
# ============================================================================

def ensure_dir(path: Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(data: Dict[str, Any], path: Path) -> Path:
    """Write JSON with sorted keys so equal data gives equal bytes."""
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_json(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON in {path}: {e.msg}", offset=e.pos)


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, 'value'):
        return value.value
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_table(df: pd.DataFrame, path: Path) -> Path:
    """Write a CSV table with a fixed float format."""
    path = Path(path)
    df.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    return path


def read_table(path: Path, required: Sequence[str]) -> pd.DataFrame:
    """Read a CSV table and check that the required columns exist."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        df = pd.read_csv(path, dtype={'id': str, 'image_id': str},
                         float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f"unreadable table {path}: {e}")
    missing = [col for col in required if col not in df.columns]
    if missing:
        raise FormatError(f"table {path} lacks columns {missing}")
    return df


# ============================================================================
# STAGE TIMER
# ============================================================================

class StageTimer:
    """Context manager appending a {name, seconds} record per stage, in run order."""

    def __init__(self, records: List[Dict[str, Any]], stage: str):
        self.records = records
        self.stage = stage
        self._start: Optional[float] = None

    def __enter__(self):
        self._start = time.perf_counter()
        logger.info(f"▶ {self.stage}")
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        elapsed = time.perf_counter() - self._start
        self.records.append({'name': self.stage, 'seconds': round(elapsed, 3)})
        if exc_type is None:
            logger.info(f"✓ {self.stage} ({elapsed:.2f}s)")
        else:
            logger.error(f"✗ {self.stage} failed after {elapsed:.2f}s: {exc_val}")
        return False
