"""File formats and persistence: manifests, masks, dataset and ledger JSONL.

All run outputs funnel through JsonlSink, a single-writer-thread appender,
so concurrent workers can never interleave partial lines. Records validate
at construction, which means a malformed record is rejected before it can
reach a file.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from PIL import Image

from .domain import (
    BBox,
    ConsistencyScore,
    Draft,
    ImageRef,
    TokenUsage,
    _require_int,
    _require_unit,
)
from .errors import (
    AutoVQAError,
    DuplicateId,
    EmptyMask,
    ImageDecodeError,
    IoError,
    ParseError,
)

LOOP_STATUSES = ("accepted", "failed", "errored")
LEDGER_KINDS = ("attempt", "terminal")
ROUTE_TARGETS = ("cap", "vqa", "vg")


@dataclass(frozen=True)
class ReferenceAnnotation:
    """Ground-truth fields a manifest entry may carry for evaluation."""

    question: str | None = None
    answer: str | None = None
    bbox: tuple[int, int, int, int] | None = None
    mask_path: str | None = None

    def __post_init__(self):
        for name in ("question", "answer", "mask_path"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, str) or not value.strip()):
                raise ValueError(f"reference {name} must be a nonempty string when given")
        if self.bbox is not None:
            box = tuple(self.bbox)
            if len(box) != 4:
                raise ValueError("reference bbox must have four coordinates")
            BBox(*box)  # validates ordering and sign
            object.__setattr__(self, "bbox", box)


@dataclass(frozen=True)
class ManifestEntry:
    """One input image: id, file path, optional dims, optional reference."""

    image_id: str
    path: str
    width: int | None = None
    height: int | None = None
    reference: ReferenceAnnotation | None = None

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id.strip():
            raise ValueError("image_id must be a nonempty string")
        if not isinstance(self.path, str) or not self.path.strip():
            raise ValueError("path must be a nonempty string")
        if (self.width is None) != (self.height is None):
            raise ValueError("width and height must be given together")
        if self.width is not None:
            if _require_int(self.width, "width") < 1 or _require_int(self.height, "height") < 1:
                raise ValueError("width and height must be >= 1")


def _read_jsonl(path: str) -> Iterator[tuple[int, dict]]:
    """Yield (line_number, object) pairs; blank lines are skipped."""
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


def load_manifest(path: str) -> list[ManifestEntry]:
    """Read a manifest JSONL file; ids must be unique."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for n, obj in _read_jsonl(path):
        try:
            reference = None
            if obj.get("reference") is not None:
                ref = obj["reference"]
                if not isinstance(ref, dict):
                    raise ValueError("reference must be an object")
                bbox = ref.get("bbox")
                reference = ReferenceAnnotation(
                    question=ref.get("question"),
                    answer=ref.get("answer"),
                    bbox=tuple(bbox) if bbox is not None else None,
                    mask_path=ref.get("mask_path"),
                )
            entry = ManifestEntry(
                image_id=obj.get("image_id"),
                path=obj.get("path"),
                width=obj.get("width"),
                height=obj.get("height"),
                reference=reference,
            )
        except (AutoVQAError, ValueError, TypeError) as exc:
            raise ParseError(str(exc), line=n) from exc
        if entry.image_id in seen:
            raise DuplicateId(f"duplicate image_id {entry.image_id!r} at line {n}")
        seen.add(entry.image_id)
        entries.append(entry)
    return entries


def resolve_image(entry: ManifestEntry) -> ImageRef:
    """Turn a manifest entry into an ImageRef, probing dims when absent."""
    if entry.width is not None and entry.height is not None:
        return ImageRef(entry.image_id, entry.path, entry.width, entry.height)
    try:
        with Image.open(entry.path) as img:
            width, height = img.size
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageDecodeError(
            f"cannot probe dimensions of {entry.image_id!r} at {entry.path!r}: {exc}"
        ) from exc
    return ImageRef(entry.image_id, entry.path, width, height)


def load_mask(path: str) -> np.ndarray:
    """Load a single-channel mask image as a 2D array (nonzero = foreground)."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"))
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode mask at {path!r}: {exc}") from exc


def mask_to_bbox(mask: np.ndarray, width: int, height: int) -> BBox:
    """Tightest half-open box around the mask's nonzero pixels."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {arr.shape}")
    if arr.shape != (height, width):
        raise ValueError(
            f"mask shape {arr.shape} does not match (height, width) = ({height}, {width})"
        )
    ys, xs = np.nonzero(arr)
    if ys.size == 0:
        raise EmptyMask("mask has no foreground pixels")
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass(frozen=True)
class AnnotationRecord:
    """One accepted annotation as persisted in the dataset file.

    Carries the image dimensions so downstream statistics can recompute
    box area fractions from the file alone.
    """

    image_id: str
    image_width: int
    image_height: int
    question: str
    answer: str
    mention: str
    bbox: tuple[int, int, int, int]
    s_vqa: float
    s_vg: float
    total: float
    iterations_used: int
    prompt_tokens: int
    completion_tokens: int
    rubric_version: int

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id.strip():
            raise ValueError("image_id must be a nonempty string")
        for name in ("question", "answer", "mention"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"{name} must be a nonempty string")
        for name in ("image_width", "image_height"):
            if _require_int(getattr(self, name), name) < 1:
                raise ValueError(f"{name} must be >= 1")
        box = tuple(self.bbox)
        if len(box) != 4:
            raise ValueError("bbox must have four coordinates")
        parsed = BBox(*box)
        if parsed.x2 > self.image_width or parsed.y2 > self.image_height:
            raise ValueError("bbox exceeds the image extent")
        object.__setattr__(self, "bbox", box)
        for name in ("s_vqa", "s_vg", "total"):
            object.__setattr__(self, name, _require_unit(getattr(self, name), name))
        if _require_int(self.iterations_used, "iterations_used") < 1:
            raise ValueError("iterations_used must be >= 1")
        for name in ("prompt_tokens", "completion_tokens"):
            if _require_int(getattr(self, name), name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if _require_int(self.rubric_version, "rubric_version") < 0:
            raise ValueError("rubric_version must be >= 0")

    @classmethod
    def from_parts(
        cls,
        image: ImageRef,
        draft: Draft,
        score: ConsistencyScore,
        iterations_used: int,
        tokens: TokenUsage,
        rubric_version: int,
    ) -> "AnnotationRecord":
        return cls(
            image_id=image.id,
            image_width=image.width,
            image_height=image.height,
            question=draft.question,
            answer=draft.answer,
            mention=draft.mention,
            bbox=draft.bbox.as_tuple(),
            s_vqa=score.s_vqa,
            s_vg=score.s_vg,
            total=score.total,
            iterations_used=iterations_used,
            prompt_tokens=tokens.prompt_tokens,
            completion_tokens=tokens.completion_tokens,
            rubric_version=rubric_version,
        )

    def to_json_obj(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "question": self.question,
            "answer": self.answer,
            "mention": self.mention,
            "bbox": list(self.bbox),
            "scores": {"s_vqa": self.s_vqa, "s_vg": self.s_vg, "total": self.total},
            "iterations_used": self.iterations_used,
            "tokens": {"prompt": self.prompt_tokens, "completion": self.completion_tokens},
            "rubric_version": self.rubric_version,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "AnnotationRecord":
        try:
            scores = obj["scores"]
            tokens = obj["tokens"]
            return cls(
                image_id=obj["image_id"],
                image_width=obj["image_width"],
                image_height=obj["image_height"],
                question=obj["question"],
                answer=obj["answer"],
                mention=obj["mention"],
                bbox=tuple(obj["bbox"]),
                s_vqa=scores["s_vqa"],
                s_vg=scores["s_vg"],
                total=scores["total"],
                iterations_used=obj["iterations_used"],
                prompt_tokens=tokens["prompt"],
                completion_tokens=tokens["completion"],
                rubric_version=obj["rubric_version"],
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"record missing or mistyped field: {exc}") from exc


@dataclass(frozen=True)
class LedgerEntry:
    """One ledger line: a per-iteration attempt row or a per-image terminal row."""

    kind: str
    image_id: str
    prompt_tokens: int
    completion_tokens: int
    iteration: int | None = None
    s_vqa: float | None = None
    s_vg: float | None = None
    total: float | None = None
    routed_target: str | None = None
    rubric_version: int | None = None
    status: str | None = None
    iterations_used: int | None = None
    best_total: float | None = None
    error: str | None = None

    def __post_init__(self):
        if self.kind not in LEDGER_KINDS:
            raise ValueError(f"kind must be one of {LEDGER_KINDS}, got {self.kind!r}")
        if not isinstance(self.image_id, str) or not self.image_id.strip():
            raise ValueError("image_id must be a nonempty string")
        for name in ("prompt_tokens", "completion_tokens"):
            if _require_int(getattr(self, name), name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.kind == "attempt":
            if _require_int(self.iteration, "iteration") < 1:
                raise ValueError("iteration must be >= 1")
            for name in ("s_vqa", "s_vg", "total"):
                object.__setattr__(self, name, _require_unit(getattr(self, name), name))
            if self.routed_target is not None and self.routed_target not in ROUTE_TARGETS:
                raise ValueError(f"routed_target must be None or one of {ROUTE_TARGETS}")
            if _require_int(self.rubric_version, "rubric_version") < 0:
                raise ValueError("rubric_version must be >= 0")
            if self.status is not None or self.iterations_used is not None:
                raise ValueError("attempt entries carry no terminal fields")
        else:
            if self.status not in LOOP_STATUSES:
                raise ValueError(f"status must be one of {LOOP_STATUSES}, got {self.status!r}")
            if _require_int(self.iterations_used, "iterations_used") < 0:
                raise ValueError("iterations_used must be >= 0")
            if self.best_total is not None:
                object.__setattr__(self, "best_total", _require_unit(self.best_total, "best_total"))
            if self.status == "errored" and not self.error:
                raise ValueError("errored terminal entries need an error message")
            if self.iteration is not None:
                raise ValueError("terminal entries carry no attempt fields")

    @classmethod
    def from_attempt(cls, image_id: str, attempt) -> "LedgerEntry":
        return cls(
            kind="attempt",
            image_id=image_id,
            prompt_tokens=attempt.token_usage.prompt_tokens,
            completion_tokens=attempt.token_usage.completion_tokens,
            iteration=attempt.iteration,
            s_vqa=attempt.score.s_vqa,
            s_vg=attempt.score.s_vg,
            total=attempt.score.total,
            routed_target=attempt.routed_target,
            rubric_version=attempt.rubric_version,
        )

    @classmethod
    def terminal(
        cls,
        image_id: str,
        status: str,
        iterations_used: int,
        tokens: TokenUsage,
        best_total: float | None = None,
        error: str | None = None,
    ) -> "LedgerEntry":
        return cls(
            kind="terminal",
            image_id=image_id,
            prompt_tokens=tokens.prompt_tokens,
            completion_tokens=tokens.completion_tokens,
            status=status,
            iterations_used=iterations_used,
            best_total=best_total,
            error=error,
        )

    def to_json_obj(self) -> dict:
        obj: dict = {"kind": self.kind, "image_id": self.image_id}
        if self.kind == "attempt":
            obj.update(
                {
                    "iteration": self.iteration,
                    "scores": {"s_vqa": self.s_vqa, "s_vg": self.s_vg, "total": self.total},
                    "routed_target": self.routed_target,
                    "rubric_version": self.rubric_version,
                }
            )
        else:
            obj.update(
                {
                    "status": self.status,
                    "iterations_used": self.iterations_used,
                    "best_total": self.best_total,
                    "error": self.error,
                }
            )
        obj["tokens"] = {"prompt": self.prompt_tokens, "completion": self.completion_tokens}
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "LedgerEntry":
        try:
            tokens = obj["tokens"]
            kind = obj["kind"]
            if kind == "attempt":
                scores = obj["scores"]
                return cls(
                    kind=kind,
                    image_id=obj["image_id"],
                    prompt_tokens=tokens["prompt"],
                    completion_tokens=tokens["completion"],
                    iteration=obj["iteration"],
                    s_vqa=scores["s_vqa"],
                    s_vg=scores["s_vg"],
                    total=scores["total"],
                    routed_target=obj.get("routed_target"),
                    rubric_version=obj["rubric_version"],
                )
            return cls(
                kind=kind,
                image_id=obj["image_id"],
                prompt_tokens=tokens["prompt"],
                completion_tokens=tokens["completion"],
                status=obj["status"],
                iterations_used=obj["iterations_used"],
                best_total=obj.get("best_total"),
                error=obj.get("error"),
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"ledger entry missing or mistyped field: {exc}") from exc


def load_dataset(path: str) -> list[AnnotationRecord]:
    records = []
    for n, obj in _read_jsonl(path):
        try:
            records.append(AnnotationRecord.from_json_obj(obj))
        except (ValueError, AutoVQAError) as exc:
            raise ParseError(str(exc), line=n) from exc
    return records


def load_ledger(path: str) -> list[LedgerEntry]:
    entries = []
    for n, obj in _read_jsonl(path):
        try:
            entries.append(LedgerEntry.from_json_obj(obj))
        except (ValueError, AutoVQAError) as exc:
            raise ParseError(str(exc), line=n) from exc
    return entries


class JsonlSink:
    """Append-only JSONL writer backed by one writer thread.

    Producers enqueue whole lines; the single consumer appends them in
    queue order, so concurrent submitters can never interleave bytes of
    two records. close() drains the queue and surfaces any write error.
    """

    def __init__(self, path: str):
        self.path = str(path)
        try:
            self._file = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot open {self.path!r} for append: {exc}") from exc
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._error: OSError | None = None
        self._closed = False
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()

    def _drain(self):
        while True:
            line = self._queue.get()
            if line is None:
                break
            if self._error is not None:
                continue
            try:
                self._file.write(line)
                self._file.flush()
            except OSError as exc:
                self._error = exc
        try:
            self._file.close()
        except OSError as exc:
            self._error = self._error or exc

    def write_line(self, line: str):
        if self._closed:
            raise IoError(f"sink for {self.path!r} is closed")
        if self._error is not None:
            raise IoError(f"failed writing {self.path!r}: {self._error}")
        self._queue.put(line)

    def close(self):
        if self._closed:
            return
        self._closed = True
        self._queue.put(None)
        self._thread.join()
        if self._error is not None:
            raise IoError(f"failed writing {self.path!r}: {self._error}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def append_record(sink: JsonlSink, record) -> None:
    """Serialize one validated record as a single JSONL line."""
    if not isinstance(record, (AnnotationRecord, LedgerEntry)):
        raise TypeError(
            f"record must be an AnnotationRecord or LedgerEntry, got {type(record).__name__}"
        )
    sink.write_line(json.dumps(record.to_json_obj(), ensure_ascii=False) + "\n")
