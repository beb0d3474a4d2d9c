"""Draft verification: stepwise verdicts from the verifier model.

The VQA check sees the raw image plus the question and proposed answer;
the grounding check sees the image with the candidate box drawn on it in
red plus the mention. Both demand strict JSON verdicts; a reply that
never parses degrades to a single zero-score step carrying the raw text,
so one bad verifier reply cannot kill an image.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass

from PIL import Image, ImageDraw

from .backends import ChatRequest, read_image_bytes
from .domain import (
    BBox,
    ConsistencyScore,
    Critique,
    ImageRef,
    StepVerdict,
    TokenUsage,
)
from .errors import ImageDecodeError, MalformedVerdict, OutOfBounds, WeightError
from .generation import JSON_ONLY_SUFFIX

MAX_STEPS = 12
CRITIQUE_CLIP = 800
VERIFIER_MAX_TOKENS = 1024

OVERLAY_COLOR = (255, 0, 0)

VQA_VERIFIER_SYSTEM = (
    "You verify visual question-answer pairs against the attached image. "
    "Reason step by step: is the question answerable from the image alone, "
    "is the proposed answer correct, is anything ambiguous or hallucinated? "
    "For each step write one critique sentence and a score in [0, 1], where "
    "1 means the step found no problem.\n"
    'Reply with a JSON object: {"steps": [{"critique": "<sentence>", '
    f'"score": <number>}}, ...]}} with 1 to {MAX_STEPS} steps.'
)

VG_VERIFIER_SYSTEM = (
    "You verify a region grounding. The attached image has a red rectangle "
    "drawn on it, which is the proposed box for the given mention. Reason "
    "step by step: does the box cover the mentioned region, is it tight, "
    "does it avoid unrelated content? For each step write one critique "
    "sentence and a score in [0, 1], where 1 means the step found no problem.\n"
    'Reply with a JSON object: {"steps": [{"critique": "<sentence>", '
    f'"score": <number>}}, ...]}} with 1 to {MAX_STEPS} steps.'
)

VQA_SCORER_SYSTEM = (
    "You score visual question-answer pairs against the attached image. "
    "Output a single quality score in [0, 1] with no explanation.\n"
    'Reply with a JSON object: {"score": <number>}'
)

VG_SCORER_SYSTEM = (
    "You score a region grounding. The attached image has a red rectangle "
    "drawn on it, which is the proposed box for the given mention. Output "
    "a single quality score in [0, 1] with no explanation.\n"
    'Reply with a JSON object: {"score": <number>}'
)


@dataclass(frozen=True)
class Verdict:
    """Parsed verifier output: ordered reasoning steps plus the raw reply."""

    steps: tuple[StepVerdict, ...]
    raw_text: str

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not 1 <= len(self.steps) <= MAX_STEPS:
            raise ValueError(f"verdict needs 1 to {MAX_STEPS} steps, got {len(self.steps)}")
        for step in self.steps:
            if not isinstance(step, StepVerdict):
                raise TypeError("steps must be StepVerdict instances")


def render_overlay(image: ImageRef, bbox: BBox) -> bytes:
    """Draw the box on the image in red and return PNG bytes.

    Stroke width scales with image size: max(2, round(0.004 * min(W, H))).
    Pixels outside the stroke band are left untouched.
    """
    if bbox.x2 > image.width or bbox.y2 > image.height:
        raise OutOfBounds(
            f"box {bbox.as_tuple()} exceeds image extent {image.width}x{image.height}"
        )
    try:
        with Image.open(image.path) as source:
            canvas = source.convert("RGB")
    except (OSError, ValueError, SyntaxError) as exc:
        raise ImageDecodeError(
            f"cannot decode image {image.id!r} at {image.path!r}: {exc}"
        ) from exc
    stroke = max(2, round(0.004 * min(image.width, image.height)))
    draw = ImageDraw.Draw(canvas)
    # half-open box -> inclusive pixel corners for Pillow
    draw.rectangle((bbox.x1, bbox.y1, bbox.x2 - 1, bbox.y2 - 1), outline=OVERLAY_COLOR, width=stroke)
    buffer = io.BytesIO()
    canvas.save(buffer, format="PNG")
    return buffer.getvalue()


def parse_verdict(text: str) -> Verdict:
    """Parse a strict step-verdict reply; raises MalformedVerdict otherwise."""
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedVerdict(f"reply is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedVerdict("reply must be a JSON object")
    steps_raw = obj.get("steps")
    if not isinstance(steps_raw, list) or not 1 <= len(steps_raw) <= MAX_STEPS:
        raise MalformedVerdict(f"steps must be a list of 1 to {MAX_STEPS} items")
    steps: list[StepVerdict] = []
    for i, item in enumerate(steps_raw):
        if not isinstance(item, dict):
            raise MalformedVerdict(f"step {i} is not an object")
        critique = item.get("critique")
        score = item.get("score")
        if not isinstance(critique, str):
            raise MalformedVerdict(f"step {i} critique must be a string")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise MalformedVerdict(f"step {i} score must be a number")
        if not 0.0 <= score <= 1.0:
            raise MalformedVerdict(f"step {i} score {score!r} outside [0, 1]")
        steps.append(StepVerdict(critique=critique, score=float(score)))
    return Verdict(steps=tuple(steps), raw_text=text)


def _parse_verdict_or_none(text: str) -> Verdict | None:
    try:
        return parse_verdict(text)
    except MalformedVerdict:
        return None


def _parse_score_or_none(text: str) -> Verdict | None:
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return None
    if not isinstance(obj, dict):
        return None
    score = obj.get("score")
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        return None
    if not 0.0 <= score <= 1.0:
        return None
    return Verdict(steps=(StepVerdict(critique="", score=float(score)),), raw_text=text)


def _verify(backend, request: ChatRequest, retries: int, parse) -> tuple[Verdict, TokenUsage]:
    usage = TokenUsage.zero()
    raw = ""
    current = request
    for _ in range(retries + 1):
        response = backend.chat(current)
        usage = usage + response.usage
        raw = response.text
        verdict = parse(raw)
        if verdict is not None:
            return verdict, usage
        current = dataclasses.replace(request, user_text=request.user_text + JSON_ONLY_SUFFIX)
    # unparseable after all retries: degrade to a zero-score step so the
    # loop records a rejection instead of erroring the whole image
    fallback = Verdict(steps=(StepVerdict(critique=raw[:CRITIQUE_CLIP], score=0.0),), raw_text=raw)
    return fallback, usage


def evaluate_vqa(
    image: ImageRef,
    question: str,
    answer: str,
    backend,
    retries: int = 2,
    *,
    score_only: bool = False,
) -> tuple[Verdict, TokenUsage]:
    """Judge the QA pair against the raw image."""
    if not question.strip() or not answer.strip():
        raise ValueError("question and answer must be nonempty")
    request = ChatRequest(
        system_text=VQA_SCORER_SYSTEM if score_only else VQA_VERIFIER_SYSTEM,
        user_text=f"Question: {question}\nProposed answer: {answer}",
        image_payload=read_image_bytes(image),
        max_output_tokens=VERIFIER_MAX_TOKENS,
    )
    parse = _parse_score_or_none if score_only else _parse_verdict_or_none
    return _verify(backend, request, retries, parse)


def evaluate_vg(
    image: ImageRef,
    bbox: BBox,
    mention: str,
    backend,
    retries: int = 2,
    *,
    score_only: bool = False,
) -> tuple[Verdict, TokenUsage]:
    """Judge the box against the mention, using the box-overlay rendering."""
    if not mention.strip():
        raise ValueError("mention must be nonempty")
    overlay = render_overlay(image, bbox)
    request = ChatRequest(
        system_text=VG_SCORER_SYSTEM if score_only else VG_VERIFIER_SYSTEM,
        user_text=(
            f"Region mention: {mention}\n"
            "The red rectangle drawn on the attached image is the proposed box."
        ),
        image_payload=overlay,
        max_output_tokens=VERIFIER_MAX_TOKENS,
    )
    parse = _parse_score_or_none if score_only else _parse_verdict_or_none
    return _verify(backend, request, retries, parse)


def _step_mean(steps: tuple[StepVerdict, ...]) -> float:
    # fsum is correctly rounded, so the mean is order-independent
    return min(1.0, max(0.0, math.fsum(s.score for s in steps) / len(steps)))


def aggregate_score(
    vqa: Verdict, vg: Verdict, w_vqa: float = 0.7, w_vg: float = 0.3
) -> ConsistencyScore:
    """Weighted combination of the per-modality step-score means."""
    for name, value in (("w_vqa", w_vqa), ("w_vg", w_vg)):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            raise WeightError(f"{name} must be a nonnegative number, got {value!r}")
    if abs(w_vqa + w_vg - 1.0) > 1e-12:
        raise WeightError(f"weights must sum to 1, got {w_vqa} + {w_vg}")
    return ConsistencyScore.from_parts(
        s_vqa=_step_mean(vqa.steps),
        s_vg=_step_mean(vg.steps),
        w_vqa=float(w_vqa),
        w_vg=float(w_vg),
    )


def compose_critique(vqa: Verdict, vg: Verdict) -> Critique:
    """Concatenate both verdicts' critiques, VQA steps first."""
    return Critique.from_steps(vqa.steps, vg.steps)


def decide_acceptance(score: ConsistencyScore, tau: float) -> bool:
    """Accept when the total reaches the threshold; the boundary accepts."""
    if isinstance(tau, bool) or not isinstance(tau, (int, float)) or not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be a number in [0, 1], got {tau!r}")
    return score.total >= tau
