from __future__ import annotations

import json

import pytest
from PIL import Image

from autovqa import (
    Attempt,
    BBox,
    ConsistencyScore,
    Critique,
    Draft,
    ImageRef,
    StepVerdict,
    TokenUsage,
)


@pytest.fixture
def make_image(tmp_path):
    """Create a real PNG on disk and return its ImageRef."""

    def _make(image_id="img-001", width=100, height=80, color=(90, 120, 90)):
        path = tmp_path / f"{image_id}.png"
        Image.new("RGB", (width, height), color).save(path)
        return ImageRef(image_id, str(path), width, height)

    return _make


@pytest.fixture
def make_attempt():
    """Build a valid Attempt with controllable scores."""

    def _make(
        iteration=1,
        s_vqa=0.5,
        s_vg=0.5,
        caption="a scene",
        question="What is shown?",
        answer="A thing.",
        mention="the thing",
        bbox=(0, 0, 10, 10),
        routed_target=None,
        rubric_version=0,
        tokens=(10, 5),
        critiques=("question is vague", "box is loose"),
    ):
        draft = Draft(
            caption=caption,
            question=question,
            answer=answer,
            mention=mention,
            bbox=BBox(*bbox),
            iteration=iteration,
        )
        critique = Critique.from_steps(
            (StepVerdict(critiques[0], s_vqa),),
            (StepVerdict(critiques[1], s_vg),),
        )
        return Attempt(
            iteration=iteration,
            draft=draft,
            critique=critique,
            score=ConsistencyScore.from_parts(s_vqa, s_vg, 0.7, 0.3),
            rubric_version=rubric_version,
            token_usage=TokenUsage(*tokens),
            routed_target=routed_target,
        )

    return _make


def _reject_then_accept_entries(image_id: str) -> list[dict]:
    """Reject-then-accept scenario: leash draft scores 0.4, the optimizer
    reroutes the question rubric, and the phone draft scores 0.935."""
    return [
        {"role": "caption", "image_id": image_id,
         "reply": {"caption": "a man holds a balloon on a thin leash"}, "usage": [50, 12]},
        {"role": "vqa", "image_id": image_id,
         "reply": {"question": "What is attached to the balloon leash?", "answer": "A small tag."},
         "usage": [80, 30]},
        {"role": "vg_mention", "image_id": image_id,
         "reply": {"mention": "the balloon leash"}, "usage": [40, 10]},
        {"role": "grounder", "image_id": image_id,
         "detections": [{"box": [10, 10, 30, 40], "score": 0.55, "label": "leash"}]},
        {"role": "verifier", "image_id": image_id,
         "reply": {"steps": [{"critique": "the leash is barely visible", "score": 0.4}]},
         "usage": [60, 20]},
        {"role": "verifier", "image_id": image_id,
         "reply": {"steps": [{"critique": "box does not cover a clear object", "score": 0.4}]},
         "usage": [60, 20]},
        {"role": "optimizer", "image_id": image_id,
         "reply": {"diagnosis": "question targets an ungroundable thin object",
                   "target": "vqa",
                   "refinement": "Ask about a clearly visible, groundable object."},
         "usage": [100, 40]},
        {"role": "caption", "image_id": image_id,
         "reply": {"caption": "a man in a blue shirt holds a phone"}, "usage": [50, 12]},
        {"role": "vqa", "image_id": image_id,
         "reply": {"question": "What is the man holding?", "answer": "A phone."}, "usage": [80, 30]},
        {"role": "vg_mention", "image_id": image_id,
         "reply": {"mention": "the phone in the man's hand"}, "usage": [40, 10]},
        {"role": "grounder", "image_id": image_id,
         "detections": [{"box": [40, 30, 60, 55], "score": 0.91, "label": "phone"}]},
        {"role": "verifier", "image_id": image_id,
         "reply": {"steps": [{"critique": "answer matches the image", "score": 1.0},
                             {"critique": "question is clear", "score": 0.9}]},
         "usage": [60, 20]},
        {"role": "verifier", "image_id": image_id,
         "reply": {"steps": [{"critique": "box tightly covers the phone", "score": 0.9}]},
         "usage": [60, 20]},
    ]


def _happy_entries(
    image_id: str,
    question: str = "What is the man holding?",
    answer: str = "A phone.",
    mention: str = "the phone",
    box: tuple[int, int, int, int] = (10, 10, 30, 40),
    usage: tuple[int, int] = (50, 10),
) -> list[dict]:
    """Single-iteration acceptance with perfect verdicts."""
    return [
        {"role": "caption", "image_id": image_id,
         "reply": {"caption": f"scene for {image_id}"}, "usage": list(usage)},
        {"role": "vqa", "image_id": image_id,
         "reply": {"question": question, "answer": answer}, "usage": list(usage)},
        {"role": "vg_mention", "image_id": image_id,
         "reply": {"mention": mention}, "usage": list(usage)},
        {"role": "grounder", "image_id": image_id,
         "detections": [{"box": list(box), "score": 0.9, "label": mention}]},
        {"role": "verifier", "image_id": image_id,
         "reply": {"steps": [{"critique": "fine", "score": 1.0}]}, "usage": list(usage)},
        {"role": "verifier", "image_id": image_id,
         "reply": {"steps": [{"critique": "fine", "score": 1.0}]}, "usage": list(usage)},
    ]


@pytest.fixture
def reject_then_accept_entries():
    return _reject_then_accept_entries


@pytest.fixture
def happy_entries():
    return _happy_entries


@pytest.fixture
def write_fixture(tmp_path):
    """Write a mock-run fixture JSONL from config, image specs, and script entries."""

    def _write(name, script_entries, images, config=None):
        path = tmp_path / name
        lines = []
        if config is not None:
            lines.append({"kind": "config", **config})
        for image in images:
            lines.append({"kind": "image", **image})
        for entry in script_entries:
            if entry["role"] == "grounder":
                line = {k: v for k, v in entry.items() if k != "role"}
                line["kind"] = "ground"
            else:
                line = dict(entry)
                line["kind"] = "chat"
            lines.append(line)
        path.write_text("".join(json.dumps(line) + "\n" for line in lines), encoding="utf-8")
        return str(path)

    return _write
