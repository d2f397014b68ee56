"""
Evaluation report exported by `eval --json`.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from src.core.errors import DataError

REPORT_KEYS = ("top1", "top5", "per_class_iou", "miou", "macc", "aacc", "params", "flops")


@dataclass
class MetricsReport:
    top1: Optional[float] = None
    top5: Optional[float] = None
    per_class_iou: List[Optional[float]] = field(default_factory=list)
    miou: Optional[float] = None
    macc: Optional[float] = None
    aacc: Optional[float] = None
    params: int = 0
    flops: int = 0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        # NaN IoUs of absent classes become null
        data["per_class_iou"] = [None if v is None or math.isnan(v) else float(v) for v in self.per_class_iou]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _is_fraction(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and 0.0 <= value <= 1.0


def validate_report(data: Dict[str, Any]) -> Dict[str, Any]:
    """Check a report document: every key present, fractions in [0, 1], counts exact integers."""
    missing = [k for k in REPORT_KEYS if k not in data]
    if missing:
        raise DataError(f"metrics report misses keys {missing}")
    extra = sorted(set(data) - set(REPORT_KEYS))
    if extra:
        raise DataError(f"metrics report has unknown keys {extra}")
    for key in ("top1", "top5", "miou", "macc", "aacc"):
        if data[key] is not None and not _is_fraction(data[key]):
            raise DataError(f"metrics report '{key}' must be null or in [0, 1], got {data[key]!r}")
    if not isinstance(data["per_class_iou"], list):
        raise DataError("metrics report 'per_class_iou' must be a list")
    for v in data["per_class_iou"]:
        if v is not None and not _is_fraction(v):
            raise DataError(f"per-class IoU {v!r} outside [0, 1]")
    for key in ("params", "flops"):
        if not isinstance(data[key], int) or isinstance(data[key], bool) or data[key] < 0:
            raise DataError(f"metrics report '{key}' must be a non-negative integer")
    return data
