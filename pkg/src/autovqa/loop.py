"""The generate, verify, refine loop and batch orchestration.

One image runs up to max_iterations draft attempts. Each attempt is
verified on both modalities, scored, and either accepted (total at or
above tau) or fed to the optimizer, whose refinement reshapes the rubrics
for the next attempt. Failures inside one image never leak into the
batch: they surface as an errored outcome for that image alone.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import Backends
from .domain import (
    Attempt,
    Draft,
    ImageRef,
    LoopConfig,
    MemoryLog,
    RubricSet,
    TokenUsage,
    bbox_area_fraction,
)
from .errors import AutoVQAError, EmptyRun, MalformedAction
from .generation import generate_draft
from .optimizer import apply_refinement, propose_refinement, serialize_memory
from .verification import (
    aggregate_score,
    compose_critique,
    decide_acceptance,
    evaluate_vg,
    evaluate_vqa,
)

logger = logging.getLogger(__name__)

STATUSES = ("accepted", "failed", "errored")

# cues marking counting or spatial-relation questions; word-bounded so
# e.g. "country" never matches "count"
RELATIONAL_COUNTING_CUES = (
    "how many",
    "number of",
    "count",
    "left of",
    "right of",
    "behind",
    "in front of",
    "next to",
    "between",
    "above",
    "below",
    "closest",
    "farthest",
)
_CUE_PATTERN = re.compile(
    r"\b(?:" + "|".join(re.escape(cue) for cue in RELATIONAL_COUNTING_CUES) + r")\b"
)

RELATIONAL_COUNTING = "relational_counting"
ATTRIBUTE_OTHER = "attribute_other"


@dataclass(frozen=True)
class ImageOutcome:
    """Everything one image's loop produced."""

    image: ImageRef
    status: str
    attempts: tuple[Attempt, ...]
    accepted_draft: Draft | None
    best_attempt: Attempt | None
    iterations_used: int
    total_tokens: TokenUsage
    error: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "attempts", tuple(self.attempts))
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}, got {self.status!r}")
        if self.iterations_used != len(self.attempts):
            raise ValueError("iterations_used must equal the number of attempts")
        summed = TokenUsage.zero()
        for attempt in self.attempts:
            summed = summed + attempt.token_usage
        if summed != self.total_tokens:
            raise ValueError("total_tokens must equal the sum over attempts")
        if self.status == "accepted":
            if self.accepted_draft is None or self.best_attempt is None:
                raise ValueError("accepted outcomes need accepted_draft and best_attempt")
        if self.status == "errored" and not self.error:
            raise ValueError("errored outcomes need an error message")
        if self.status != "accepted" and self.accepted_draft is not None:
            raise ValueError("only accepted outcomes carry an accepted_draft")


def _best_attempt(attempts: tuple[Attempt, ...]) -> Attempt | None:
    if not attempts:
        return None
    # highest total wins; ties go to the earliest iteration
    return max(attempts, key=lambda a: (a.score.total, -a.iteration))


def run_image_loop(
    image: ImageRef,
    base_rubrics: RubricSet,
    cfg: LoopConfig,
    backends: Backends,
) -> ImageOutcome:
    """Run the full annotation loop for one image.

    Engine errors (transport exhaustion, undecodable image, a stage that
    never produced usable output) end the image with an errored outcome;
    they are never raised to the caller.
    """
    handles = backends.for_image(image.id)
    rubrics = base_rubrics
    memory = MemoryLog.start(base_rubrics)
    attempts: list[Attempt] = []
    total = TokenUsage.zero()
    budget = 1 if cfg.single_pass else cfg.max_iterations

    def finish(status: str, accepted: Draft | None = None, error: str | None = None):
        return ImageOutcome(
            image=image,
            status=status,
            attempts=tuple(attempts),
            accepted_draft=accepted,
            best_attempt=_best_attempt(tuple(attempts)),
            iterations_used=len(attempts),
            total_tokens=total,
            error=error,
        )

    try:
        for iteration in range(1, budget + 1):
            draft, usage = generate_draft(image, rubrics, handles, cfg, iteration)
            vqa_verdict, used = evaluate_vqa(
                image,
                draft.question,
                draft.answer,
                handles.verifier,
                cfg.parse_retries,
                score_only=cfg.score_only_verification,
            )
            usage = usage + used
            vg_verdict, used = evaluate_vg(
                image,
                draft.bbox,
                draft.mention,
                handles.verifier,
                cfg.parse_retries,
                score_only=cfg.score_only_verification,
            )
            usage = usage + used
            score = aggregate_score(vqa_verdict, vg_verdict, cfg.w_vqa, cfg.w_vg)
            critique = compose_critique(vqa_verdict, vg_verdict)
            accepted = decide_acceptance(score, cfg.tau)

            routed: str | None = None
            rubrics_after = rubrics
            if not accepted and iteration < budget:
                view = memory.latest_only() if cfg.disable_memory else memory
                memory_text = serialize_memory(view, cfg.memory_keep_full)
                provisional = Attempt(
                    iteration=iteration,
                    draft=draft,
                    critique=critique,
                    score=score,
                    rubric_version=rubrics.version,
                    token_usage=usage,
                )
                try:
                    action, used = propose_refinement(
                        rubrics, provisional, memory_text, handles.optimizer, cfg.parse_retries
                    )
                    usage = usage + used
                    routed = action.target
                    rubrics_after = apply_refinement(
                        rubrics, action, iteration, all_targets=cfg.disable_routing
                    )
                except MalformedAction as exc:
                    # keep the spend, drop the action: next draft runs
                    # under unchanged rubrics and the iteration is consumed
                    if exc.usage is not None:
                        usage = usage + exc.usage
                    logger.warning("image %s iteration %d: %s", image.id, iteration, exc)

            attempt = Attempt(
                iteration=iteration,
                draft=draft,
                critique=critique,
                score=score,
                rubric_version=rubrics.version,
                token_usage=usage,
                routed_target=routed,
            )
            attempts.append(attempt)
            total = total + usage
            memory = memory.extend(attempt, rubrics_after)
            rubrics = rubrics_after

            if accepted:
                return finish("accepted", accepted=draft)
        return finish("failed")
    except AutoVQAError as exc:
        logger.warning("image %s errored: %s", image.id, exc)
        return finish("errored", error=f"{type(exc).__name__}: {exc}")


def run_batch(
    images,
    base_rubrics: RubricSet,
    cfg: LoopConfig,
    backends: Backends,
    workers: int = 1,
    on_outcome=None,
) -> list[ImageOutcome]:
    """Annotate many images on a worker pool.

    Outcomes come back in input order regardless of worker count, and
    on_outcome (when given) is invoked in that same order, so downstream
    writers see a schedule-independent stream. Any exception inside one
    image is converted to an errored outcome for that image.
    """
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ValueError(f"workers must be an int >= 1, got {workers!r}")
    images = list(images)
    if not images:
        return []

    def one(image: ImageRef) -> ImageOutcome:
        try:
            return run_image_loop(image, base_rubrics, cfg, backends)
        except Exception as exc:
            logger.exception("image %s crashed", image.id)
            return ImageOutcome(
                image=image,
                status="errored",
                attempts=(),
                accepted_draft=None,
                best_attempt=None,
                iterations_used=0,
                total_tokens=TokenUsage.zero(),
                error=f"{type(exc).__name__}: {exc}",
            )

    results: list[ImageOutcome] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for outcome in pool.map(one, images):
            if on_outcome is not None:
                on_outcome(outcome)
            results.append(outcome)
    return results


def classify_question(question: str) -> str:
    """Coarse question-complexity class from surface cues.

    Counting and spatial-relation phrasing maps to relational_counting;
    everything else is attribute_other.
    """
    if not isinstance(question, str) or not question.strip():
        raise ValueError("question must be a nonempty string")
    if _CUE_PATTERN.search(question.lower()):
        return RELATIONAL_COUNTING
    return ATTRIBUTE_OTHER


@dataclass(frozen=True)
class RunStats:
    """Aggregates over a finished run; per-success fields are None when
    nothing was accepted."""

    image_count: int
    success_rate: float
    avg_iterations_per_success: float | None
    avg_tokens_per_success: float | None
    avg_question_words: float | None
    avg_answer_words: float | None
    avg_mention_words: float | None
    avg_bbox_area_fraction: float | None
    complexity_distribution: dict[str, float] | None

    def to_json_obj(self) -> dict:
        return {
            "image_count": self.image_count,
            "success_rate": self.success_rate,
            "avg_iterations_per_success": self.avg_iterations_per_success,
            "avg_tokens_per_success": self.avg_tokens_per_success,
            "avg_question_words": self.avg_question_words,
            "avg_answer_words": self.avg_answer_words,
            "avg_mention_words": self.avg_mention_words,
            "avg_bbox_area_fraction": self.avg_bbox_area_fraction,
            "complexity_distribution": self.complexity_distribution,
        }


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def compute_stats(outcomes) -> RunStats:
    """Run-level statistics over image outcomes."""
    outcomes = list(outcomes)
    if not outcomes:
        raise EmptyRun("no outcomes to aggregate")
    accepted = [o for o in outcomes if o.status == "accepted"]
    success_rate = len(accepted) / len(outcomes)
    if not accepted:
        return RunStats(
            image_count=len(outcomes),
            success_rate=success_rate,
            avg_iterations_per_success=None,
            avg_tokens_per_success=None,
            avg_question_words=None,
            avg_answer_words=None,
            avg_mention_words=None,
            avg_bbox_area_fraction=None,
            complexity_distribution=None,
        )
    drafts = [o.accepted_draft for o in accepted]
    rc_fraction = _mean(
        1.0 if classify_question(d.question) == RELATIONAL_COUNTING else 0.0 for d in drafts
    )
    return RunStats(
        image_count=len(outcomes),
        success_rate=success_rate,
        avg_iterations_per_success=_mean(o.iterations_used for o in accepted),
        avg_tokens_per_success=_mean(o.total_tokens.total for o in accepted),
        avg_question_words=_mean(len(d.question.split()) for d in drafts),
        avg_answer_words=_mean(len(d.answer.split()) for d in drafts),
        avg_mention_words=_mean(len(d.mention.split()) for d in drafts),
        avg_bbox_area_fraction=_mean(
            bbox_area_fraction(o.accepted_draft.bbox, o.image) for o in accepted
        ),
        complexity_distribution={
            RELATIONAL_COUNTING: rc_fraction,
            # complement keeps the two-class distribution summing to 1.0
            ATTRIBUTE_OTHER: 1.0 - rc_fraction,
        },
    )
