"""Draft generation: caption, QA pair, region mention, grounded box.

Each chat stage demands a strict JSON reply; a reply that fails to parse
is retried with the same prompt plus a one-line reminder, up to the
configured parse retry budget. Token usage is accumulated across retries.
"""

from __future__ import annotations

import dataclasses
import json
import logging

from .backends import Backends, ChatRequest, read_image_bytes
from .domain import BBox, Draft, ImageRef, LoopConfig, Rubric, RubricSet, TokenUsage
from .errors import (
    AutoVQAError,
    EmptyGeneration,
    MalformedGeneration,
    NoGrounding,
    StageError,
)

logger = logging.getLogger(__name__)

JSON_ONLY_SUFFIX = "\n\nReply with valid JSON only."

CAPTION_INSTRUCTION = (
    "Describe the attached image in one detailed, factual caption. "
    "Cover the main objects, their attributes, and their spatial relations.\n"
    'Reply with a JSON object: {"caption": "<caption>"}'
)

QA_INSTRUCTION_TEMPLATE = (
    "Caption of the attached image:\n"
    "{caption}\n\n"
    "Write one visual question about the image together with its correct answer. "
    "The question must be answerable from the image alone.\n"
    'Reply with a JSON object: {{"question": "<question>", "answer": "<answer>"}}'
)

MENTION_INSTRUCTION_TEMPLATE = (
    "Question: {question}\n"
    "Answer: {answer}\n\n"
    "Name the single region of the attached image that this question and answer "
    "are about, as a short noun phrase suitable for a box query.\n"
    'Reply with a JSON object: {{"mention": "<noun phrase>"}}'
)

CAPTION_MAX_TOKENS = 512
QA_MAX_TOKENS = 256
MENTION_MAX_TOKENS = 128

DEFAULT_RUBRIC_TEXTS = {
    "cap": (
        "You write factual, detailed image captions. Describe the main objects, "
        "their attributes, and their spatial relations without speculation."
    ),
    "vqa": (
        "You write one clear visual question with a concise correct answer. "
        "The question targets a clearly visible object or relation and must be "
        "answerable from the image alone."
    ),
    "vg": (
        "You name the single image region a question-answer pair is about, as a "
        "short noun phrase that a detector can localize with one bounding box."
    ),
}


def default_rubrics() -> RubricSet:
    return RubricSet(
        cap=Rubric("cap", DEFAULT_RUBRIC_TEXTS["cap"]),
        vqa=Rubric("vqa", DEFAULT_RUBRIC_TEXTS["vqa"]),
        vg=Rubric("vg", DEFAULT_RUBRIC_TEXTS["vg"]),
    )


def _load_json_object(text: str) -> dict | None:
    try:
        value = json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return None
    return value if isinstance(value, dict) else None


def _parse_caption(text: str) -> str | None:
    obj = _load_json_object(text)
    if obj is None:
        return None
    caption = obj.get("caption")
    if isinstance(caption, str) and caption.strip():
        return caption.strip()
    return None


def _parse_qa(text: str) -> tuple[str, str] | None:
    obj = _load_json_object(text)
    if obj is None:
        return None
    question = obj.get("question")
    answer = obj.get("answer")
    if (
        isinstance(question, str)
        and question.strip()
        and isinstance(answer, str)
        and answer.strip()
    ):
        return question.strip(), answer.strip()
    return None


def _parse_mention(text: str) -> str | None:
    obj = _load_json_object(text)
    if obj is None:
        return None
    mention = obj.get("mention")
    if isinstance(mention, str) and mention.strip():
        return mention.strip()
    return None


def _chat_json(backend, request: ChatRequest, retries: int, parse):
    """Call the backend until parse succeeds or retries run out.

    Returns (value_or_None, accumulated_usage, last_raw_text). Retries
    resend the identical prompt with JSON_ONLY_SUFFIX appended once.
    """
    usage = TokenUsage.zero()
    raw = ""
    current = request
    for _ in range(retries + 1):
        response = backend.chat(current)
        usage = usage + response.usage
        raw = response.text
        value = parse(raw)
        if value is not None:
            return value, usage, raw
        current = dataclasses.replace(request, user_text=request.user_text + JSON_ONLY_SUFFIX)
    return None, usage, raw


def generate_caption(
    image: ImageRef, rubric: Rubric, backend, retries: int = 2
) -> tuple[str, TokenUsage]:
    """Caption the image under the caption rubric."""
    if rubric.key != "cap":
        raise ValueError(f"caption stage needs the cap rubric, got {rubric.key!r}")
    request = ChatRequest(
        system_text=rubric.full_text(),
        user_text=CAPTION_INSTRUCTION,
        image_payload=read_image_bytes(image),
        max_output_tokens=CAPTION_MAX_TOKENS,
    )
    caption, usage, raw = _chat_json(backend, request, retries, _parse_caption)
    if caption is None:
        raise EmptyGeneration(
            f"no usable caption for image {image.id!r} after {retries + 1} attempts "
            f"(last reply: {raw[:200]!r})"
        )
    return caption, usage


def generate_qa(
    image: ImageRef, caption: str, rubric: Rubric, backend, retries: int = 2
) -> tuple[str, str, TokenUsage]:
    """Write one question-answer pair conditioned on the image and its caption."""
    if rubric.key != "vqa":
        raise ValueError(f"qa stage needs the vqa rubric, got {rubric.key!r}")
    if not caption.strip():
        raise ValueError("caption must be nonempty")
    request = ChatRequest(
        system_text=rubric.full_text(),
        user_text=QA_INSTRUCTION_TEMPLATE.format(caption=caption),
        image_payload=read_image_bytes(image),
        max_output_tokens=QA_MAX_TOKENS,
    )
    pair, usage, raw = _chat_json(backend, request, retries, _parse_qa)
    if pair is None:
        raise MalformedGeneration(
            f"no usable question/answer for image {image.id!r} after {retries + 1} "
            f"attempts (last reply: {raw[:200]!r})"
        )
    question, answer = pair
    return question, answer, usage


def generate_mention(
    image: ImageRef, question: str, answer: str, rubric: Rubric, backend, retries: int = 2
) -> tuple[str, TokenUsage]:
    """Name the region the QA pair is about. Conditions on the QA pair, not the caption."""
    if rubric.key != "vg":
        raise ValueError(f"mention stage needs the vg rubric, got {rubric.key!r}")
    if not question.strip() or not answer.strip():
        raise ValueError("question and answer must be nonempty")
    request = ChatRequest(
        system_text=rubric.full_text(),
        user_text=MENTION_INSTRUCTION_TEMPLATE.format(question=question, answer=answer),
        image_payload=read_image_bytes(image),
        max_output_tokens=MENTION_MAX_TOKENS,
    )
    mention, usage, raw = _chat_json(backend, request, retries, _parse_mention)
    if mention is None:
        raise MalformedGeneration(
            f"no usable mention for image {image.id!r} after {retries + 1} attempts "
            f"(last reply: {raw[:200]!r})"
        )
    return mention, usage


def select_bbox(image: ImageRef, mention: str, grounder, confidence_floor: float) -> BBox:
    """Ground the mention and pick the highest-confidence eligible box.

    Ties on confidence break toward the smaller x1 (then the rest of the
    detection sort order). Detections below the floor are discarded;
    equality with the floor keeps a detection eligible.
    """
    if not 0.0 <= confidence_floor < 1.0:
        raise ValueError(f"confidence_floor must be in [0, 1), got {confidence_floor!r}")
    detections = grounder.ground(image, mention)
    eligible = [d for d in detections if d.confidence >= confidence_floor]
    if not eligible:
        raise NoGrounding(
            f"no detection at or above floor {confidence_floor} for mention "
            f"{mention!r} on image {image.id!r}"
        )
    best = min(
        eligible,
        key=lambda d: (-d.confidence, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.label),
    )
    return best.bbox


def generate_draft(
    image: ImageRef,
    rubrics: RubricSet,
    backends: Backends,
    cfg: LoopConfig,
    iteration: int,
) -> tuple[Draft, TokenUsage]:
    """Run the full caption -> QA -> mention -> box pipeline for one draft.

    Any engine error inside a stage is re-raised as StageError tagged with
    the stage that broke; token usage is summed across the chat stages.
    """
    usage = TokenUsage.zero()
    stage = "generate_caption"
    try:
        caption, used = generate_caption(image, rubrics.cap, backends.caption, cfg.parse_retries)
        usage = usage + used
        stage = "generate_qa"
        question, answer, used = generate_qa(
            image, caption, rubrics.vqa, backends.vqa, cfg.parse_retries
        )
        usage = usage + used
        stage = "generate_mention"
        mention, used = generate_mention(
            image, question, answer, rubrics.vg, backends.vg_mention, cfg.parse_retries
        )
        usage = usage + used
        stage = "select_bbox"
        bbox = select_bbox(image, mention, backends.grounder, cfg.grounding_confidence_floor)
    except AutoVQAError as exc:
        raise StageError(stage, str(exc)) from exc
    draft = Draft(
        caption=caption,
        question=question,
        answer=answer,
        mention=mention,
        bbox=bbox,
        iteration=iteration,
    )
    return draft, usage
