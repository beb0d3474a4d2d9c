"""Clients for the remote model roles the loop drives.

Five chat roles (caption, vqa, vg_mention, verifier, optimizer) speak the
OpenAI-style chat-completions protocol; the grounder role is a plain JSON
detection endpoint. Transports are injectable so tests never open sockets,
and a fully scripted mock hub provides deterministic offline backends.
"""

from __future__ import annotations

import base64
import json
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

import requests

from .domain import BBox, ImageRef, TokenUsage, make_bbox
from .errors import (
    AuthError,
    AutoVQAError,
    ExhaustedRetries,
    ImageDecodeError,
    MalformedDetection,
    RateLimited,
    ScriptExhausted,
    Timeout,
    TransportError,
)

CHAT_ROLES = ("caption", "vqa", "vg_mention", "verifier", "optimizer")
ALL_ROLES = CHAT_ROLES + ("grounder",)

BACKOFF_BASE_SECONDS = 0.5

_RETRYABLE = (RateLimited, Timeout, TransportError)

_SCRIPT_ERRORS: dict[str, type[AutoVQAError]] = {
    "auth": AuthError,
    "rate_limited": RateLimited,
    "timeout": Timeout,
    "transport": TransportError,
    "exhausted_retries": ExhaustedRetries,
    "malformed_detection": MalformedDetection,
}


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one model role.

    api_key_env names the environment variable holding the credential;
    an empty string means the endpoint needs no auth header, while a
    named but unset variable is an AuthError at call time.
    """

    role: str
    base_url: str
    model: str
    api_key_env: str
    temperature: float = 0.0
    timeout_seconds: float = 60.0
    max_retries: int = 3

    def __post_init__(self):
        if self.role not in ALL_ROLES:
            raise ValueError(f"role must be one of {ALL_ROLES}, got {self.role!r}")
        if not isinstance(self.base_url, str) or not self.base_url.strip():
            raise ValueError("base_url must be a nonempty string")
        if not isinstance(self.model, str):
            raise TypeError("model must be a string")
        if not isinstance(self.api_key_env, str):
            raise TypeError("api_key_env must be a string")
        if self.timeout_seconds <= 0:
            raise ValueError("timeout_seconds must be positive")
        if not isinstance(self.max_retries, int) or isinstance(self.max_retries, bool) or self.max_retries < 0:
            raise ValueError("max_retries must be an int >= 0")


@dataclass(frozen=True)
class ChatRequest:
    """One chat call: system text, user text, optional attached image."""

    system_text: str
    user_text: str
    image_payload: bytes | None = None
    max_output_tokens: int = 1024
    response_must_be_json: bool = True


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: TokenUsage


@dataclass(frozen=True)
class Detection:
    """One grounder hit: a validated box, a confidence, a free-form label."""

    bbox: BBox
    confidence: float
    label: str = ""


def read_image_bytes(image: ImageRef) -> bytes:
    """Raw file bytes for attaching to a request."""
    try:
        with open(image.path, "rb") as handle:
            data = handle.read()
    except OSError as exc:
        raise ImageDecodeError(f"cannot read image {image.id!r} at {image.path!r}: {exc}") from exc
    if not data:
        raise ImageDecodeError(f"image file for {image.id!r} is empty")
    return data


def _mime_for(payload: bytes) -> str:
    if payload[:3] == b"\xff\xd8\xff":
        return "image/jpeg"
    return "image/png"


def _auth_headers(cfg: BackendConfig) -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    if cfg.api_key_env:
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise AuthError(f"environment variable {cfg.api_key_env!r} is not set")
        headers["Authorization"] = f"Bearer {key}"
    return headers


def _default_post(url: str, headers: dict, body: dict, timeout: float):
    try:
        resp = requests.post(url, headers=headers, json=body, timeout=timeout)
    except requests.Timeout as exc:
        raise Timeout(f"request to {url} timed out after {timeout}s") from exc
    except requests.RequestException as exc:
        raise TransportError(f"request to {url} failed: {exc}") from exc
    try:
        payload = resp.json()
    except ValueError:
        payload = None
    return resp.status_code, payload


def _with_retries(
    fn: Callable[[], Any],
    max_retries: int,
    sleep: Callable[[float], None],
    rng: random.Random,
):
    """Run fn with exponential backoff and full jitter on transient errors.

    Makes exactly max_retries + 1 attempts; sleeps only between attempts,
    each delay drawn uniformly from [0, 0.5s * 2**attempt).
    """
    last: Exception | None = None
    attempts = max_retries + 1
    for attempt in range(attempts):
        try:
            return fn()
        except _RETRYABLE as exc:
            last = exc
            if attempt < attempts - 1:
                sleep(rng.uniform(0.0, BACKOFF_BASE_SECONDS * (2**attempt)))
    raise ExhaustedRetries(f"gave up after {attempts} attempts: {last}") from last


def _check_status(status: int, url: str) -> None:
    if status in (401, 403):
        raise AuthError(f"backend at {url} rejected the credential (HTTP {status})")
    if status == 429:
        raise RateLimited(f"backend at {url} returned HTTP 429")
    if status != 200:
        raise TransportError(f"backend at {url} returned HTTP {status}")


def _parse_usage(payload: Mapping) -> TokenUsage:
    usage = payload.get("usage") or {}
    try:
        return TokenUsage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
    except (TypeError, ValueError):
        return TokenUsage.zero()


def chat_complete(
    cfg: BackendConfig,
    request: ChatRequest,
    *,
    post: Callable | None = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> ChatResponse:
    """POST one chat-completions call, retrying transient failures.

    Auth failures are never retried; rate limits, timeouts, and transport
    errors are retried up to cfg.max_retries times, then surface as
    ExhaustedRetries wrapping the final cause.
    """
    if cfg.role not in CHAT_ROLES:
        raise ValueError(f"role {cfg.role!r} is not a chat role")
    post = post or _default_post
    rng = rng or random.Random()
    headers = _auth_headers(cfg)
    url = cfg.base_url.rstrip("/") + "/chat/completions"

    content: list[dict] = [{"type": "text", "text": request.user_text}]
    if request.image_payload is not None:
        encoded = base64.b64encode(request.image_payload).decode("ascii")
        content.append(
            {
                "type": "image_url",
                "image_url": {"url": f"data:{_mime_for(request.image_payload)};base64,{encoded}"},
            }
        )
    body: dict[str, Any] = {
        "model": cfg.model,
        "temperature": cfg.temperature,
        "max_tokens": request.max_output_tokens,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": content},
        ],
    }
    if request.response_must_be_json:
        body["response_format"] = {"type": "json_object"}

    def once() -> ChatResponse:
        status, payload = post(url, headers, body, cfg.timeout_seconds)
        _check_status(status, url)
        try:
            text = payload["choices"][0]["message"]["content"]
        except (TypeError, KeyError, IndexError):
            text = None
        if not isinstance(text, str):
            raise TransportError(f"backend at {url} returned an unusable completion payload")
        return ChatResponse(text=text, usage=_parse_usage(payload))

    return _with_retries(once, cfg.max_retries, sleep, rng)


def _validate_detections(raw: Any, image: ImageRef) -> list[Detection]:
    if not isinstance(raw, list):
        raise MalformedDetection(f"detections must be a list, got {type(raw).__name__}")
    out: list[Detection] = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            raise MalformedDetection(f"detection {i} is not an object")
        box = item.get("box")
        score = item.get("score")
        label = item.get("label", "")
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise MalformedDetection(f"detection {i} box must be [x1, y1, x2, y2]")
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise MalformedDetection(f"detection {i} score must be a number in [0, 1]")
        if not isinstance(label, str):
            raise MalformedDetection(f"detection {i} label must be a string")
        try:
            bbox = make_bbox(box[0], box[1], box[2], box[3], image)
        except (AutoVQAError, TypeError) as exc:
            raise MalformedDetection(f"detection {i} box invalid: {exc}") from exc
        out.append(Detection(bbox=bbox, confidence=float(score), label=label))
    # total order: confidence desc, then top-left-most box, then label
    out.sort(key=lambda d: (-d.confidence, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.label))
    return out


def ground_mention(
    cfg: BackendConfig,
    image: ImageRef,
    mention: str,
    *,
    post: Callable | None = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> list[Detection]:
    """POST one grounding query; returns validated, deterministically sorted hits."""
    if cfg.role != "grounder":
        raise ValueError(f"role {cfg.role!r} is not the grounder role")
    if not mention.strip():
        raise ValueError("mention must be nonempty")
    post = post or _default_post
    rng = rng or random.Random()
    headers = _auth_headers(cfg)
    url = cfg.base_url.rstrip("/") + "/ground"
    body = {
        "image_b64": base64.b64encode(read_image_bytes(image)).decode("ascii"),
        "text_query": mention,
    }

    def once() -> list[Detection]:
        status, payload = post(url, headers, body, cfg.timeout_seconds)
        _check_status(status, url)
        if not isinstance(payload, dict) or "detections" not in payload:
            raise TransportError(f"grounder at {url} returned an unusable payload")
        return _validate_detections(payload["detections"], image)

    return _with_retries(once, cfg.max_retries, sleep, rng)


class HttpChatBackend:
    """Chat handle bound to one role's HTTP endpoint."""

    def __init__(self, cfg: BackendConfig):
        if cfg.role not in CHAT_ROLES:
            raise ValueError(f"role {cfg.role!r} is not a chat role")
        self.cfg = cfg

    def chat(self, request: ChatRequest) -> ChatResponse:
        return chat_complete(self.cfg, request)

    def for_image(self, image_id: str) -> "HttpChatBackend":
        return self


class HttpGrounder:
    """Grounding handle bound to the grounder HTTP endpoint."""

    def __init__(self, cfg: BackendConfig):
        if cfg.role != "grounder":
            raise ValueError(f"role {cfg.role!r} is not the grounder role")
        self.cfg = cfg

    def ground(self, image: ImageRef, mention: str) -> list[Detection]:
        return ground_mention(self.cfg, image, mention)

    def for_image(self, image_id: str) -> "HttpGrounder":
        return self


@dataclass(frozen=True)
class Backends:
    """One handle per model role, as the loop consumes them."""

    caption: Any
    vqa: Any
    vg_mention: Any
    verifier: Any
    optimizer: Any
    grounder: Any

    def for_image(self, image_id: str) -> "Backends":
        """Handles scoped to one image; lets scripted runs key replies per image."""
        return Backends(
            caption=self.caption.for_image(image_id),
            vqa=self.vqa.for_image(image_id),
            vg_mention=self.vg_mention.for_image(image_id),
            verifier=self.verifier.for_image(image_id),
            optimizer=self.optimizer.for_image(image_id),
            grounder=self.grounder.for_image(image_id),
        )


def http_backends(configs: Mapping[str, BackendConfig]) -> Backends:
    """Build the full handle bundle from per-role configs; all six required."""
    missing = [role for role in ALL_ROLES if role not in configs]
    if missing:
        raise ValueError(f"missing backend configs for roles: {', '.join(missing)}")
    for role in ALL_ROLES:
        if configs[role].role != role:
            raise ValueError(f"config under {role!r} declares role {configs[role].role!r}")
    return Backends(
        caption=HttpChatBackend(configs["caption"]),
        vqa=HttpChatBackend(configs["vqa"]),
        vg_mention=HttpChatBackend(configs["vg_mention"]),
        verifier=HttpChatBackend(configs["verifier"]),
        optimizer=HttpChatBackend(configs["optimizer"]),
        grounder=HttpGrounder(configs["grounder"]),
    )


@dataclass(frozen=True)
class TranscriptEntry:
    """One recorded mock call, in consumption order."""

    index: int
    role: str
    image_id: str | None
    kind: str
    request: ChatRequest | None = None
    mention: str | None = None


class _MockChatHandle:
    def __init__(self, script: "MockScript", role: str, image_id: str | None):
        self._script = script
        self._role = role
        self._image_id = image_id

    def chat(self, request: ChatRequest) -> ChatResponse:
        return self._script._chat(self._role, self._image_id, request)

    def for_image(self, image_id: str) -> "_MockChatHandle":
        return _MockChatHandle(self._script, self._role, image_id)


class _MockGrounderHandle:
    def __init__(self, script: "MockScript", image_id: str | None):
        self._script = script
        self._image_id = image_id

    def ground(self, image: ImageRef, mention: str) -> list[Detection]:
        return self._script._ground(image, mention)

    def for_image(self, image_id: str) -> "_MockGrounderHandle":
        return _MockGrounderHandle(self._script, image_id)


class MockScript:
    """Deterministic offline backends driven by a scripted fixture.

    Each fixture entry names a role and optionally an image_id; replies are
    consumed FIFO per (role, image_id), falling back to the role's unkeyed
    queue. Every incoming request is appended to .transcript so tests can
    assert on exact prompt contents. Thread safe.
    """

    def __init__(self, entries: Iterable[Mapping]):
        self._queues: dict[tuple[str, str | None], deque] = {}
        self._lock = threading.Lock()
        self.transcript: list[TranscriptEntry] = []
        for n, entry in enumerate(entries):
            role = entry.get("role")
            if role not in ALL_ROLES:
                raise ValueError(f"fixture entry {n}: unknown role {role!r}")
            if "error" in entry and entry["error"] not in _SCRIPT_ERRORS:
                raise ValueError(f"fixture entry {n}: unknown error {entry['error']!r}")
            key = (role, entry.get("image_id"))
            self._queues.setdefault(key, deque()).append(dict(entry))

    def backends(self) -> Backends:
        return Backends(
            caption=_MockChatHandle(self, "caption", None),
            vqa=_MockChatHandle(self, "vqa", None),
            vg_mention=_MockChatHandle(self, "vg_mention", None),
            verifier=_MockChatHandle(self, "verifier", None),
            optimizer=_MockChatHandle(self, "optimizer", None),
            grounder=_MockGrounderHandle(self, None),
        )

    def remaining(self) -> int:
        with self._lock:
            return sum(len(q) for q in self._queues.values())

    def _next(self, role: str, image_id: str | None) -> dict:
        queue = self._queues.get((role, image_id))
        if not queue:
            queue = self._queues.get((role, None))
        if not queue:
            raise ScriptExhausted(f"no scripted reply left for role={role!r} image={image_id!r}")
        return queue.popleft()

    def _take(
        self,
        role: str,
        image_id: str | None,
        kind: str,
        request: ChatRequest | None = None,
        mention: str | None = None,
    ) -> dict:
        with self._lock:
            self.transcript.append(
                TranscriptEntry(len(self.transcript), role, image_id, kind, request, mention)
            )
            entry = self._next(role, image_id)
        if "error" in entry:
            raise _SCRIPT_ERRORS[entry["error"]](f"scripted {entry['error']} for role={role!r}")
        return entry

    def _chat(self, role: str, image_id: str | None, request: ChatRequest) -> ChatResponse:
        entry = self._take(role, image_id, "chat", request=request)
        if "reply" in entry and not isinstance(entry["reply"], str):
            text = json.dumps(entry["reply"], ensure_ascii=False)
        elif "reply" in entry:
            text = entry["reply"]
        else:
            text = entry.get("reply_text", "")
        usage = entry.get("usage", (0, 0))
        return ChatResponse(text=text, usage=TokenUsage(int(usage[0]), int(usage[1])))

    def _ground(self, image: ImageRef, mention: str) -> list[Detection]:
        entry = self._take("grounder", image.id, "ground", mention=mention)
        return _validate_detections(entry.get("detections", []), image)


def mock_script(fixture: Iterable[Mapping] | Mapping[str, Iterable[Mapping]]) -> MockScript:
    """Build scripted backends from a fixture.

    Accepts either a flat iterable of entry dicts (each carrying "role")
    or a mapping of role name to entry list.
    """
    if isinstance(fixture, Mapping):
        entries: list[dict] = []
        for role, items in fixture.items():
            for item in items:
                merged = dict(item)
                merged.setdefault("role", role)
                entries.append(merged)
        return MockScript(entries)
    return MockScript(list(fixture))
