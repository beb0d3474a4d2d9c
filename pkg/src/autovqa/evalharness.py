"""Evaluation arithmetic: box overlap, grounding metrics, composite scores.

Boxes are half-open integer rectangles, so intersections and unions are
exact integer counts; the Acc@0.5IoU boundary is decided in integer
arithmetic (2 * intersection >= union) and can never wobble on float
rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from .domain import BBox
from .errors import DuplicateKey, EmptyInput, IoError, ParseError, RangeError

VQA_METRICS = ("clipscore", "tifa", "vqascore")
VG_METRICS = ("miou", "acc_at_05")
METRIC_NAMES = VQA_METRICS + VG_METRICS


def _intersection_area(a: BBox, b: BBox) -> int:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 1.0 exactly iff they are equal."""
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class GroundingMetrics:
    count: int
    miou: float
    acc_at_05: float


def evaluate_grounding(pairs: Iterable[tuple[BBox, BBox]]) -> GroundingMetrics:
    """Mean IoU and Acc@0.5IoU over (predicted, reference) box pairs.

    A pair whose IoU is exactly 0.5 counts as a hit.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("no box pairs to evaluate")
    ious: list[float] = []
    hits = 0
    for predicted, reference in pairs:
        inter = _intersection_area(predicted, reference)
        union = predicted.area + reference.area - inter
        ious.append(inter / union)
        if 2 * inter >= union:
            hits += 1
    return GroundingMetrics(
        count=len(pairs),
        miou=math.fsum(ious) / len(pairs),
        acc_at_05=hits / len(pairs),
    )


def _checked_means(means: Mapping[str, float], expected: tuple[str, ...], label: str) -> list[float]:
    if set(means.keys()) != set(expected):
        raise ValueError(
            f"{label} must have exactly the keys {sorted(expected)}, got {sorted(means.keys())}"
        )
    values = []
    for name in expected:
        value = means[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RangeError(f"{label}[{name!r}] must be a number")
        if not 0.0 <= value <= 1.0:
            raise RangeError(f"{label}[{name!r}] = {value!r} outside [0, 1]")
        values.append(float(value))
    return values


def composite_score(vqa_means: Mapping[str, float], vg_means: Mapping[str, float]) -> float:
    """Average of the VQA-metric mean and the grounding-metric mean."""
    vqa = _checked_means(vqa_means, VQA_METRICS, "vqa_means")
    vg = _checked_means(vg_means, VG_METRICS, "vg_means")
    return (math.fsum(vqa) / len(vqa) + math.fsum(vg) / len(vg)) / 2.0


@dataclass(frozen=True)
class MetricRow:
    """One per-image metric sample."""

    image_id: str
    metric_name: str
    value: float

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id.strip():
            raise ValueError("image_id must be a nonempty string")
        if self.metric_name not in METRIC_NAMES:
            raise ValueError(f"metric_name must be one of {METRIC_NAMES}, got {self.metric_name!r}")
        value = self.value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise RangeError(f"value for {self.metric_name!r} must be a number")
        if not 0.0 <= value <= 1.0:
            raise RangeError(f"value {value!r} for {self.metric_name!r} outside [0, 1]")
        object.__setattr__(self, "value", float(value))


@dataclass(frozen=True)
class MetricFile:
    """A pool of metric rows with unique (image_id, metric_name) keys."""

    rows: tuple[MetricRow, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        seen: set[tuple[str, str]] = set()
        for row in self.rows:
            key = (row.image_id, row.metric_name)
            if key in seen:
                raise DuplicateKey(f"duplicate metric sample for {key}")
            seen.add(key)

    def metric_names(self) -> set[str]:
        return {row.metric_name for row in self.rows}

    def mean(self, metric_name: str) -> float:
        values = [row.value for row in self.rows if row.metric_name == metric_name]
        if not values:
            raise EmptyInput(f"no samples for metric {metric_name!r}")
        return math.fsum(values) / len(values)


def load_metric_file(path: str) -> MetricFile:
    """Read metric rows from JSONL: {"image_id", "metric", "value"} per line."""
    rows: list[MetricRow] = []
    seen: set[tuple[str, str]] = set()
    for n, obj in _metric_lines(path):
        try:
            row = MetricRow(
                image_id=obj.get("image_id"),
                metric_name=obj.get("metric"),
                value=obj.get("value"),
            )
        except RangeError:
            raise
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), line=n) from exc
        key = (row.image_id, row.metric_name)
        if key in seen:
            raise DuplicateKey(f"duplicate metric sample for {key} at line {n}")
        seen.add(key)
        rows.append(row)
    return MetricFile(rows=tuple(rows))


def _metric_lines(path: str):
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot open {path!r}: {exc}") from exc
    with handle:
        for n, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line=n) from exc
            if not isinstance(obj, dict):
                raise ParseError("each line must be a JSON object", line=n)
            yield n, obj


def merge_metric_files(files: Iterable[MetricFile]) -> MetricFile:
    """Pool rows from several files; keys must stay unique across files."""
    rows: list[MetricRow] = []
    for mf in files:
        rows.extend(mf.rows)
    return MetricFile(rows=tuple(rows))
