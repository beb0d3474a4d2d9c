"""Memory-augmented rubric refinement.

After a rejected draft, the optimizer model sees the current rubrics, the
failed draft with its critique, and a serialized view of the attempt
history, and proposes one refinement routed to exactly one rubric. The
serializer keeps the newest attempts verbatim and collapses older ones to
one-line summaries so the prompt stays bounded.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass

from .backends import ChatRequest
from .domain import RUBRIC_KEYS, Attempt, MemoryLog, RubricSet, TokenUsage
from .errors import MalformedAction
from .generation import JSON_ONLY_SUFFIX
from .verification import CRITIQUE_CLIP

logger = logging.getLogger(__name__)

OPTIMIZER_MAX_TOKENS = 1024

OPTIMIZER_SYSTEM = (
    "You improve the prompt rubrics of an image-annotation pipeline. Given "
    "the current rubrics, the latest rejected draft, its verifier critique, "
    "and the attempt history, diagnose the dominant failure and propose one "
    "refinement to exactly one rubric: cap (captioning), vqa (question and "
    "answer writing), or vg (region mention writing).\n"
    'Reply with a JSON object: {"diagnosis": "<one sentence>", '
    '"target": "cap" or "vqa" or "vg", "refinement": "<one instruction>"}'
)


@dataclass(frozen=True)
class RefinementAction:
    """One optimizer decision: what went wrong, where to fix it, how."""

    diagnosis: str
    target: str
    refinement: str

    def __post_init__(self):
        if not isinstance(self.diagnosis, str):
            raise TypeError("diagnosis must be a string")
        if self.target not in RUBRIC_KEYS:
            raise ValueError(f"target must be one of {RUBRIC_KEYS}, got {self.target!r}")
        if not isinstance(self.refinement, str) or not self.refinement.strip():
            raise ValueError("refinement must be a nonempty string")


def _clip(text: str) -> str:
    return text if len(text) <= CRITIQUE_CLIP else text[:CRITIQUE_CLIP]


def serialize_memory(memory: MemoryLog, keep_full: int = 3) -> str:
    """Render the attempt history for the optimizer prompt.

    The newest keep_full attempts appear as full blocks (draft fields,
    per-modality scores, critique, routed target), each free-text field
    clipped to 800 chars; older attempts collapse to one summary line
    each. Deterministic: equal inputs render byte-identically.
    """
    if not isinstance(keep_full, int) or isinstance(keep_full, bool) or keep_full < 0:
        raise ValueError(f"keep_full must be an int >= 0, got {keep_full!r}")
    attempts = memory.attempts
    lines = [f"Attempt history: {len(attempts)} prior attempts."]
    cut = max(0, len(attempts) - keep_full)
    for attempt in attempts[:cut]:
        lines.append(
            f"iter {attempt.iteration}: S={attempt.score.total:.2f}, "
            f"target={attempt.routed_target or '-'}"
        )
    for attempt in attempts[cut:]:
        score = attempt.score
        lines.append(
            f"[iter {attempt.iteration}] S={score.total:.2f} "
            f"(vqa={score.s_vqa:.2f}, vg={score.s_vg:.2f}), "
            f"rubric v{attempt.rubric_version}, target={attempt.routed_target or '-'}"
        )
        draft = attempt.draft
        lines.append(f"  caption: {_clip(draft.caption)}")
        lines.append(f"  question: {_clip(draft.question)}")
        lines.append(f"  answer: {_clip(draft.answer)}")
        lines.append(f"  mention: {_clip(draft.mention)}")
        lines.append(f"  bbox: {list(draft.bbox.as_tuple())}")
        lines.append(f"  critique: {_clip(attempt.critique.text)}")
    return "\n".join(lines)


def parse_action(text: str) -> RefinementAction:
    """Parse a strict refinement-action reply; raises MalformedAction otherwise.

    The target is matched case-sensitively: only "cap", "vqa", or "vg".
    """
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise MalformedAction(f"reply is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedAction("reply must be a JSON object")
    diagnosis = obj.get("diagnosis")
    target = obj.get("target")
    refinement = obj.get("refinement")
    if not isinstance(diagnosis, str):
        raise MalformedAction("diagnosis must be a string")
    if not isinstance(target, str) or target not in RUBRIC_KEYS:
        raise MalformedAction(f"target must be one of {RUBRIC_KEYS}, got {target!r}")
    if not isinstance(refinement, str) or not refinement.strip():
        raise MalformedAction("refinement must be a nonempty string")
    return RefinementAction(diagnosis=diagnosis, target=target, refinement=refinement.strip())


def _optimizer_user_text(rubrics: RubricSet, attempt: Attempt, memory_text: str) -> str:
    draft = attempt.draft
    parts = ["Current rubrics:"]
    for key in RUBRIC_KEYS:
        parts.append(f"[{key}]")
        parts.append(rubrics.get(key).full_text())
        parts.append("")
    parts.append(
        f"Rejected draft (iteration {attempt.iteration}, S={attempt.score.total:.2f}):"
    )
    parts.append(f"caption: {draft.caption}")
    parts.append(f"question: {draft.question}")
    parts.append(f"answer: {draft.answer}")
    parts.append(f"mention: {draft.mention}")
    parts.append(f"bbox: {list(draft.bbox.as_tuple())}")
    parts.append("")
    parts.append("Critique:")
    parts.append(attempt.critique.text)
    parts.append("")
    parts.append(memory_text)
    return "\n".join(parts)


def propose_refinement(
    rubrics: RubricSet,
    attempt: Attempt,
    memory_text: str,
    backend,
    retries: int = 2,
) -> tuple[RefinementAction, TokenUsage]:
    """Ask the optimizer model for one routed refinement.

    Raises MalformedAction when no reply parses within the retry budget;
    the exception carries the token usage spent so callers can keep their
    accounting exact.
    """
    request = ChatRequest(
        system_text=OPTIMIZER_SYSTEM,
        user_text=_optimizer_user_text(rubrics, attempt, memory_text),
        image_payload=None,
        max_output_tokens=OPTIMIZER_MAX_TOKENS,
    )
    usage = TokenUsage.zero()
    raw = ""
    current = request
    for _ in range(retries + 1):
        response = backend.chat(current)
        usage = usage + response.usage
        raw = response.text
        try:
            return parse_action(raw), usage
        except MalformedAction:
            current = dataclasses.replace(
                request, user_text=request.user_text + JSON_ONLY_SUFFIX
            )
    raise MalformedAction(
        f"no usable refinement action after {retries + 1} attempts "
        f"(last reply: {raw[:200]!r})",
        usage=usage,
    )


def apply_refinement(
    rubrics: RubricSet,
    action: RefinementAction,
    iteration: int,
    *,
    all_targets: bool = False,
) -> RubricSet:
    """Append the refinement to the targeted rubric (or all three).

    Exactly the targeted rubric changes; a refinement whose text already
    amends that rubric is skipped, leaving the version unchanged, and the
    skip is logged at WARNING.
    """
    if not isinstance(iteration, int) or isinstance(iteration, bool) or iteration < 1:
        raise ValueError(f"iteration must be an int >= 1, got {iteration!r}")
    targets = RUBRIC_KEYS if all_targets else (action.target,)
    out = rubrics
    for key in targets:
        rubric = out.get(key)
        if any(text == action.refinement for _, text in rubric.amendments):
            logger.warning(
                "duplicate refinement for rubric %r skipped: %r", key, action.refinement
            )
            continue
        out = out.replace(key, rubric.with_amendment(iteration, action.refinement))
    return out
