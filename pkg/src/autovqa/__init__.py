"""Self-correcting VQA-with-grounding annotation engine.

Drafts caption/question/answer/mention annotations with grounded boxes,
verifies them with stepwise model verdicts, and refines its own prompt
rubrics from the critique history until a draft clears the acceptance
threshold or the iteration budget runs out.
"""

from .backends import (
    BackendConfig,
    Backends,
    ChatRequest,
    ChatResponse,
    Detection,
    MockScript,
    chat_complete,
    ground_mention,
    http_backends,
    mock_script,
    read_image_bytes,
)
from .dataio import (
    AnnotationRecord,
    JsonlSink,
    LedgerEntry,
    ManifestEntry,
    append_record,
    load_dataset,
    load_ledger,
    load_manifest,
    load_mask,
    mask_to_bbox,
    resolve_image,
)
from .domain import (
    Attempt,
    BBox,
    ConsistencyScore,
    Critique,
    Draft,
    ImageRef,
    LoopConfig,
    MemoryLog,
    Rubric,
    RubricSet,
    StepVerdict,
    TokenUsage,
    bbox_area_fraction,
    critique_text,
    make_bbox,
)
from .errors import (
    AuthError,
    AutoVQAError,
    DegenerateBox,
    DuplicateId,
    DuplicateKey,
    EmptyGeneration,
    EmptyInput,
    EmptyMask,
    EmptyRun,
    ExhaustedRetries,
    ImageDecodeError,
    IoError,
    MalformedAction,
    MalformedDetection,
    MalformedGeneration,
    MalformedVerdict,
    NoGrounding,
    OutOfBounds,
    ParseError,
    RangeError,
    RateLimited,
    ScriptExhausted,
    StageError,
    Timeout,
    TransportError,
    WeightError,
)
from .evalharness import (
    GroundingMetrics,
    MetricFile,
    MetricRow,
    composite_score,
    evaluate_grounding,
    iou,
    load_metric_file,
)
from .generation import (
    default_rubrics,
    generate_caption,
    generate_draft,
    generate_mention,
    generate_qa,
    select_bbox,
)
from .loop import (
    ATTRIBUTE_OTHER,
    RELATIONAL_COUNTING,
    ImageOutcome,
    RunStats,
    classify_question,
    compute_stats,
    run_batch,
    run_image_loop,
)
from .optimizer import (
    RefinementAction,
    apply_refinement,
    parse_action,
    propose_refinement,
    serialize_memory,
)
from .verification import (
    Verdict,
    aggregate_score,
    compose_critique,
    decide_acceptance,
    evaluate_vg,
    evaluate_vqa,
    parse_verdict,
    render_overlay,
)

__version__ = "0.1.0"
