"""Core value types for the annotation loop.

Everything here is an immutable dataclass validated at construction time,
so any instance that exists is internally consistent. Pixel boxes use
half-open integer coordinates: (x1, y1) inclusive, (x2, y2) exclusive.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import DegenerateBox, OutOfBounds

RUBRIC_KEYS = ("cap", "vqa", "vg")

WEIGHT_SUM_TOL = 1e-12


def _require_int(value, name: str) -> int:
    # bool subclasses int; a coordinate of True is a caller bug, not a box
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"{name} must be an int, got {type(value).__name__}")
    return value


def _require_unit(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"{name} must be a number, got {type(value).__name__}")
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    return float(value)


@dataclass(frozen=True)
class TokenUsage:
    """Prompt/completion token counts for one or more backend calls."""

    prompt_tokens: int
    completion_tokens: int

    def __post_init__(self):
        for name in ("prompt_tokens", "completion_tokens"):
            v = _require_int(getattr(self, name), name)
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @classmethod
    def zero(cls) -> "TokenUsage":
        return cls(0, 0)

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        if not isinstance(other, TokenUsage):
            return NotImplemented
        return TokenUsage(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class ImageRef:
    """Handle to one image on disk plus its pixel dimensions."""

    id: str
    path: str
    width: int
    height: int

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id.strip():
            raise ValueError("image id must be a nonempty string")
        if not isinstance(self.path, str):
            raise TypeError("path must be a string")
        for name in ("width", "height"):
            v = _require_int(getattr(self, name), name)
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, half-open: area = (x2 - x1) * (y2 - y1)."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            _require_int(getattr(self, name), name)
        if self.x1 < 0 or self.y1 < 0:
            raise OutOfBounds(f"negative corner ({self.x1}, {self.y1})")
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            raise DegenerateBox(
                f"box ({self.x1}, {self.y1}, {self.x2}, {self.y2}) has no area"
            )

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


def make_bbox(x1: int, y1: int, x2: int, y2: int, image: ImageRef) -> BBox:
    """Build a BBox validated against the image extent.

    Raises DegenerateBox for empty boxes and OutOfBounds for coordinates
    outside [0, width] x [0, height].
    """
    box = BBox(x1, y1, x2, y2)
    if box.x2 > image.width or box.y2 > image.height:
        raise OutOfBounds(
            f"box {box.as_tuple()} exceeds image extent "
            f"{image.width}x{image.height} for {image.id!r}"
        )
    return box


def bbox_area_fraction(box: BBox, image: ImageRef) -> float:
    """Fraction of the image area covered by the box, in (0, 1]."""
    if box.x2 > image.width or box.y2 > image.height:
        raise OutOfBounds(
            f"box {box.as_tuple()} exceeds image extent "
            f"{image.width}x{image.height}"
        )
    return box.area / (image.width * image.height)


@dataclass(frozen=True)
class Rubric:
    """Prompt rubric for one modality: base text plus numbered amendments.

    Amendments are (iteration, text) pairs with strictly increasing
    iterations and pairwise distinct texts.
    """

    key: str
    base_text: str
    amendments: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if self.key not in RUBRIC_KEYS:
            raise ValueError(f"rubric key must be one of {RUBRIC_KEYS}, got {self.key!r}")
        if not isinstance(self.base_text, str) or not self.base_text.strip():
            raise ValueError("rubric base_text must be a nonempty string")
        object.__setattr__(self, "amendments", tuple(tuple(a) for a in self.amendments))
        last_iter = 0
        seen: set[str] = set()
        for iteration, text in self.amendments:
            _require_int(iteration, "amendment iteration")
            if iteration < 1:
                raise ValueError("amendment iteration must be >= 1")
            if iteration <= last_iter:
                raise ValueError("amendment iterations must be strictly increasing")
            if not isinstance(text, str) or not text.strip():
                raise ValueError("amendment text must be a nonempty string")
            if text in seen:
                raise ValueError(f"duplicate amendment text: {text!r}")
            seen.add(text)
            last_iter = iteration

    def with_amendment(self, iteration: int, text: str) -> "Rubric":
        return Rubric(self.key, self.base_text, self.amendments + ((iteration, text),))

    def full_text(self) -> str:
        """Render the rubric as sent to models: byte-stable for equal inputs."""
        if not self.amendments:
            return self.base_text
        lines = [f"{i}. {text}" for i, (_, text) in enumerate(self.amendments, start=1)]
        return self.base_text + "\n\nRefinements:\n" + "\n".join(lines)


@dataclass(frozen=True)
class RubricSet:
    """The three per-modality rubrics used for one image's loop."""

    cap: Rubric
    vqa: Rubric
    vg: Rubric

    def __post_init__(self):
        for key in RUBRIC_KEYS:
            rubric = getattr(self, key)
            if not isinstance(rubric, Rubric):
                raise TypeError(f"{key} must be a Rubric")
            if rubric.key != key:
                raise ValueError(f"rubric under {key!r} has key {rubric.key!r}")

    @property
    def version(self) -> int:
        # derived, so it can never disagree with the amendment history
        return sum(len(getattr(self, key).amendments) for key in RUBRIC_KEYS)

    def get(self, key: str) -> Rubric:
        if key not in RUBRIC_KEYS:
            raise ValueError(f"unknown rubric key {key!r}")
        return getattr(self, key)

    def replace(self, key: str, rubric: Rubric) -> "RubricSet":
        if rubric.key != key:
            raise ValueError(f"rubric key {rubric.key!r} does not match slot {key!r}")
        return dataclasses.replace(self, **{key: rubric})


@dataclass(frozen=True)
class Draft:
    """One candidate annotation: caption, QA pair, mention, grounded box."""

    caption: str
    question: str
    answer: str
    mention: str
    bbox: BBox
    iteration: int

    def __post_init__(self):
        if not isinstance(self.caption, str):
            raise TypeError("caption must be a string")
        for name in ("question", "answer", "mention"):
            v = getattr(self, name)
            if not isinstance(v, str) or not v.strip():
                raise ValueError(f"{name} must be a nonempty string")
        if not isinstance(self.bbox, BBox):
            raise TypeError("bbox must be a BBox")
        if _require_int(self.iteration, "iteration") < 1:
            raise ValueError("iteration must be >= 1")


@dataclass(frozen=True)
class StepVerdict:
    """One verifier reasoning step: a critique sentence and a score in [0, 1]."""

    critique: str
    score: float

    def __post_init__(self):
        if not isinstance(self.critique, str):
            raise TypeError("critique must be a string")
        object.__setattr__(self, "score", _require_unit(self.score, "score"))


def critique_text(
    vqa_steps: tuple[StepVerdict, ...], vg_steps: tuple[StepVerdict, ...]
) -> str:
    """Canonical rendering of step critiques, VQA steps first."""
    lines = [f"[VQA {i}] {s.critique}" for i, s in enumerate(vqa_steps, start=1)]
    lines += [f"[VG {i}] {s.critique}" for i, s in enumerate(vg_steps, start=1)]
    return "\n".join(lines)


@dataclass(frozen=True)
class Critique:
    """Concatenated verifier critiques for one draft."""

    vqa_steps: tuple[StepVerdict, ...]
    vg_steps: tuple[StepVerdict, ...]
    text: str

    def __post_init__(self):
        object.__setattr__(self, "vqa_steps", tuple(self.vqa_steps))
        object.__setattr__(self, "vg_steps", tuple(self.vg_steps))
        if not self.vqa_steps or not self.vg_steps:
            raise ValueError("both modalities need at least one step")
        for step in self.vqa_steps + self.vg_steps:
            if not isinstance(step, StepVerdict):
                raise TypeError("steps must be StepVerdict instances")
        if self.text != critique_text(self.vqa_steps, self.vg_steps):
            raise ValueError("critique text does not match its steps")

    @classmethod
    def from_steps(
        cls,
        vqa_steps: tuple[StepVerdict, ...],
        vg_steps: tuple[StepVerdict, ...],
    ) -> "Critique":
        vqa_steps = tuple(vqa_steps)
        vg_steps = tuple(vg_steps)
        return cls(vqa_steps, vg_steps, critique_text(vqa_steps, vg_steps))


@dataclass(frozen=True)
class ConsistencyScore:
    """Per-modality means and their weighted combination."""

    s_vqa: float
    s_vg: float
    total: float
    w_vqa: float
    w_vg: float

    def __post_init__(self):
        for name in ("s_vqa", "s_vg", "total"):
            object.__setattr__(self, name, _require_unit(getattr(self, name), name))
        for name in ("w_vqa", "w_vg"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                raise ValueError(f"{name} must be a nonnegative number")
            object.__setattr__(self, name, float(v))
        if abs(self.w_vqa + self.w_vg - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError("weights must sum to 1")
        expected = self.w_vqa * self.s_vqa + self.w_vg * self.s_vg
        if abs(self.total - expected) > 1e-9:
            raise ValueError("total is not the weighted combination of the parts")

    @classmethod
    def from_parts(
        cls, s_vqa: float, s_vg: float, w_vqa: float, w_vg: float
    ) -> "ConsistencyScore":
        total = w_vqa * s_vqa + w_vg * s_vg
        # convex combination of values in [0,1]; strip float dust only
        total = min(1.0, max(0.0, total))
        return cls(s_vqa, s_vg, total, w_vqa, w_vg)


@dataclass(frozen=True)
class Attempt:
    """Record of one loop iteration: the draft, its verdicts, its cost."""

    iteration: int
    draft: Draft
    critique: Critique
    score: ConsistencyScore
    rubric_version: int
    token_usage: TokenUsage
    routed_target: str | None = None

    def __post_init__(self):
        if _require_int(self.iteration, "iteration") < 1:
            raise ValueError("iteration must be >= 1")
        if self.draft.iteration != self.iteration:
            raise ValueError("draft iteration does not match attempt iteration")
        if _require_int(self.rubric_version, "rubric_version") < 0:
            raise ValueError("rubric_version must be >= 0")
        if self.routed_target is not None and self.routed_target not in RUBRIC_KEYS:
            raise ValueError(f"routed_target must be None or one of {RUBRIC_KEYS}")
        for name, typ in (
            ("critique", Critique),
            ("score", ConsistencyScore),
            ("token_usage", TokenUsage),
        ):
            if not isinstance(getattr(self, name), typ):
                raise TypeError(f"{name} must be a {typ.__name__}")


@dataclass(frozen=True)
class MemoryLog:
    """Attempt history plus the rubric snapshot before and after each attempt.

    rubric_history[0] is the starting rubric set; rubric_history[i] is the
    set in force after attempt i, so there is always exactly one more
    snapshot than there are attempts.
    """

    attempts: tuple[Attempt, ...]
    rubric_history: tuple[RubricSet, ...]

    def __post_init__(self):
        object.__setattr__(self, "attempts", tuple(self.attempts))
        object.__setattr__(self, "rubric_history", tuple(self.rubric_history))
        if len(self.rubric_history) != len(self.attempts) + 1:
            raise ValueError("rubric_history must have exactly one more entry than attempts")

    @classmethod
    def start(cls, rubrics: RubricSet) -> "MemoryLog":
        return cls((), (rubrics,))

    def extend(self, attempt: Attempt, rubrics_after: RubricSet) -> "MemoryLog":
        return MemoryLog(self.attempts + (attempt,), self.rubric_history + (rubrics_after,))

    def latest_only(self) -> "MemoryLog":
        """View holding only the most recent attempt (memory-ablation mode)."""
        if not self.attempts:
            return self
        return MemoryLog(self.attempts[-1:], self.rubric_history[-2:])


@dataclass(frozen=True)
class LoopConfig:
    """Knobs for one annotation run; defaults match the shipped behavior."""

    tau: float = 0.9
    w_vqa: float = 0.7
    w_vg: float = 0.3
    max_iterations: int = 5
    grounding_confidence_floor: float = 0.25
    parse_retries: int = 2
    memory_keep_full: int = 3
    single_pass: bool = False
    score_only_verification: bool = False
    disable_routing: bool = False
    disable_memory: bool = False

    def __post_init__(self):
        _require_unit(self.tau, "tau")
        for name in ("w_vqa", "w_vg"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                raise ValueError(f"{name} must be a nonnegative number")
        if abs(self.w_vqa + self.w_vg - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError("w_vqa + w_vg must equal 1")
        if _require_int(self.max_iterations, "max_iterations") < 1:
            raise ValueError("max_iterations must be >= 1")
        floor = self.grounding_confidence_floor
        if isinstance(floor, bool) or not isinstance(floor, (int, float)):
            raise TypeError("grounding_confidence_floor must be a number")
        if not 0.0 <= floor < 1.0:
            raise ValueError("grounding_confidence_floor must be in [0, 1)")
        if _require_int(self.parse_retries, "parse_retries") < 0:
            raise ValueError("parse_retries must be >= 0")
        if _require_int(self.memory_keep_full, "memory_keep_full") < 0:
            raise ValueError("memory_keep_full must be >= 0")
        for name in ("single_pass", "score_only_verification", "disable_routing", "disable_memory"):
            if not isinstance(getattr(self, name), bool):
                raise TypeError(f"{name} must be a bool")
