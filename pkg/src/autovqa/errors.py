"""Exception types raised across the annotation engine.

Transport failures, parse failures, and validation failures each get a
distinct type so callers can route on them; everything shares one base so
batch code can isolate any engine failure without catching bare Exception.
"""

from __future__ import annotations


class AutoVQAError(Exception):
    """Base class for every error this package raises on purpose."""


class DegenerateBox(AutoVQAError):
    """Bounding box with zero or negative extent (x1 >= x2 or y1 >= y2)."""


class OutOfBounds(AutoVQAError):
    """Bounding box coordinate outside the image extent or negative."""


class AuthError(AutoVQAError):
    """Missing or rejected API credential. Never retried."""


class RateLimited(AutoVQAError):
    """Backend returned HTTP 429. Retryable."""


class Timeout(AutoVQAError):
    """Request exceeded the configured timeout. Retryable."""


class TransportError(AutoVQAError):
    """Network failure or unusable backend response. Retryable."""


class ExhaustedRetries(AutoVQAError):
    """All retry attempts failed; wraps the final transient error."""


class MalformedDetection(AutoVQAError):
    """Grounder returned a detection that fails validation."""


class ScriptExhausted(AutoVQAError):
    """A scripted mock backend ran out of queued replies."""


class EmptyGeneration(AutoVQAError):
    """Model produced no usable caption after all parse retries."""


class MalformedGeneration(AutoVQAError):
    """Model reply never parsed into the required JSON shape."""


class NoGrounding(AutoVQAError):
    """No detection reached the confidence floor for a mention."""


class StageError(AutoVQAError):
    """Draft generation failed; carries which stage broke."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class ImageDecodeError(AutoVQAError):
    """Image file missing or undecodable."""


class MalformedVerdict(AutoVQAError):
    """Verifier reply is not a valid step-verdict JSON object."""


class WeightError(AutoVQAError):
    """Modality weights do not form a convex combination."""


class MalformedAction(AutoVQAError):
    """Optimizer reply never parsed into a refinement action.

    Carries the token usage spent across the parse retries so the loop
    can keep its token accounting exact even when the reply is dropped.
    """

    def __init__(self, message: str, usage=None):
        super().__init__(message)
        self.usage = usage


class ParseError(AutoVQAError):
    """A JSONL line failed to parse or validate; carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(AutoVQAError):
    """Two manifest entries share an image id."""


class EmptyMask(AutoVQAError):
    """Segmentation mask has no foreground pixels."""


class IoError(AutoVQAError):
    """Sink could not append to its output file."""


class DuplicateKey(AutoVQAError):
    """Metric file repeats an (image_id, metric_name) pair."""


class RangeError(AutoVQAError):
    """Metric value outside [0, 1]."""


class EmptyInput(AutoVQAError):
    """An aggregate was requested over zero samples."""


class EmptyRun(AutoVQAError):
    """Statistics were requested over zero image outcomes."""
