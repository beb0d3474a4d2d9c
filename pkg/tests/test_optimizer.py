import logging

import pytest

from autovqa import (
    MalformedAction,
    MemoryLog,
    RefinementAction,
    TokenUsage,
    apply_refinement,
    default_rubrics,
    mock_script,
    parse_action,
    propose_refinement,
    serialize_memory,
)
from autovqa.generation import JSON_ONLY_SUFFIX
from autovqa.optimizer import OPTIMIZER_SYSTEM


def _memory_with(make_attempt, count, rubrics):
    memory = MemoryLog.start(rubrics)
    for i in range(1, count + 1):
        memory = memory.extend(
            make_attempt(
                iteration=i,
                s_vqa=0.4,
                s_vg=0.4,
                question=f"Question number {i}?",
                routed_target="vqa" if i % 2 else None,
            ),
            rubrics,
        )
    return memory


class TestSerializeMemory:
    def test_empty_history(self):
        memory = MemoryLog.start(default_rubrics())
        assert serialize_memory(memory) == "Attempt history: 0 prior attempts."

    def test_full_blocks_and_summaries(self, make_attempt):
        rubrics = default_rubrics()
        memory = _memory_with(make_attempt, 5, rubrics)
        text = serialize_memory(memory, keep_full=3)
        lines = text.split("\n")
        assert lines[0] == "Attempt history: 5 prior attempts."
        # attempts 1 and 2 collapse to summaries, 3..5 are full blocks
        assert lines[1] == "iter 1: S=0.40, target=vqa"
        assert lines[2] == "iter 2: S=0.40, target=-"
        assert lines[3].startswith("[iter 3] S=0.40 (vqa=0.40, vg=0.40), rubric v0, target=")
        assert "Question number 1?" not in text
        assert "Question number 2?" not in text
        for i in (3, 4, 5):
            assert f"Question number {i}?" in text
        assert "  bbox: [0, 0, 10, 10]" in text
        assert "  critique: [VQA 1]" in text

    def test_keep_full_zero_summarizes_everything(self, make_attempt):
        memory = _memory_with(make_attempt, 2, default_rubrics())
        text = serialize_memory(memory, keep_full=0)
        assert "Question number 1?" not in text
        assert "Question number 2?" not in text
        assert "iter 2: S=0.40" in text

    def test_clips_long_fields(self, make_attempt):
        rubrics = default_rubrics()
        long_answer = "very " * 400
        memory = MemoryLog.start(rubrics).extend(
            make_attempt(iteration=1, answer=long_answer), rubrics
        )
        text = serialize_memory(memory, keep_full=3)
        answer_line = [l for l in text.split("\n") if l.startswith("  answer: ")][0]
        assert len(answer_line) == len("  answer: ") + 800

    def test_deterministic(self, make_attempt):
        memory = _memory_with(make_attempt, 4, default_rubrics())
        assert serialize_memory(memory, 2) == serialize_memory(memory, 2)

    def test_keep_full_validated(self, make_attempt):
        memory = MemoryLog.start(default_rubrics())
        with pytest.raises(ValueError):
            serialize_memory(memory, keep_full=-1)
        with pytest.raises(ValueError):
            serialize_memory(memory, keep_full=True)


class TestParseAction:
    def test_happy_path(self):
        action = parse_action(
            '{"diagnosis": "question too vague", "target": "vqa", '
            '"refinement": " Ask sharper questions. "}'
        )
        assert action.target == "vqa"
        assert action.refinement == "Ask sharper questions."
        assert action.diagnosis == "question too vague"

    def test_extra_keys_tolerated(self):
        action = parse_action(
            '{"diagnosis": "d", "target": "vg", "refinement": "r", "confidence": 0.9}'
        )
        assert action.target == "vg"

    def test_rejects_bad_shapes(self):
        bad = [
            "plain text",
            "[1]",
            '{"target": "vqa", "refinement": "r"}',
            '{"diagnosis": "d", "target": "VQA", "refinement": "r"}',
            '{"diagnosis": "d", "target": "question", "refinement": "r"}',
            '{"diagnosis": "d", "target": "vqa", "refinement": "  "}',
            '{"diagnosis": "d", "target": "vqa"}',
            '{"diagnosis": 4, "target": "vqa", "refinement": "r"}',
        ]
        for text in bad:
            with pytest.raises(MalformedAction):
                parse_action(text)

    def test_action_validates_directly(self):
        with pytest.raises(ValueError):
            RefinementAction(diagnosis="d", target="cap ", refinement="r")


class TestProposeRefinement:
    def test_happy_path_prompt_contents(self, make_attempt):
        rubrics = default_rubrics().replace(
            "vqa", default_rubrics().vqa.with_amendment(1, "Earlier fix.")
        )
        attempt = make_attempt(
            iteration=2, s_vqa=0.4, s_vg=0.4, question="What is odd here?", rubric_version=1
        )
        memory_text = "Attempt history: 1 prior attempts.\niter 1: S=0.40, target=vqa"
        script = mock_script(
            [{"role": "optimizer",
              "reply": {"diagnosis": "mention too broad", "target": "vg",
                        "refinement": "Prefer specific object names."},
              "usage": [100, 40]}]
        )
        action, usage = propose_refinement(
            rubrics, attempt, memory_text, script.backends().optimizer
        )
        assert action.target == "vg"
        assert usage == TokenUsage(100, 40)
        request = script.transcript[0].request
        assert request.system_text == OPTIMIZER_SYSTEM
        assert request.image_payload is None
        text = request.user_text
        assert "[cap]" in text and "[vqa]" in text and "[vg]" in text
        assert "Earlier fix." in text
        assert "Rejected draft (iteration 2, S=0.40):" in text
        assert "question: What is odd here?" in text
        assert "Critique:" in text
        assert memory_text in text

    def test_retries_then_raises_with_usage(self, make_attempt):
        script = mock_script(
            [{"role": "optimizer", "reply": "nonsense", "usage": [10, 5]}] * 3
        )
        with pytest.raises(MalformedAction) as info:
            propose_refinement(
                default_rubrics(), make_attempt(), "Attempt history: 0 prior attempts.",
                script.backends().optimizer, retries=2,
            )
        assert info.value.usage == TokenUsage(30, 15)
        assert len(script.transcript) == 3
        assert script.transcript[1].request.user_text.endswith(JSON_ONLY_SUFFIX)
        assert script.transcript[2].request.user_text.endswith(JSON_ONLY_SUFFIX)

    def test_recovers_on_second_reply(self, make_attempt):
        script = mock_script(
            [
                {"role": "optimizer", "reply": "garbled", "usage": [10, 5]},
                {"role": "optimizer",
                 "reply": {"diagnosis": "d", "target": "cap", "refinement": "Mention colors."},
                 "usage": [12, 6]},
            ]
        )
        action, usage = propose_refinement(
            default_rubrics(), make_attempt(), "Attempt history: 0 prior attempts.",
            script.backends().optimizer,
        )
        assert action.target == "cap"
        assert usage == TokenUsage(22, 11)


class TestApplyRefinement:
    def test_exactly_one_rubric_changes(self):
        rubrics = default_rubrics()
        action = RefinementAction("d", "vqa", "Ask about clearly visible objects.")
        updated = apply_refinement(rubrics, action, iteration=1)
        assert updated.version == rubrics.version + 1
        assert updated.vqa.amendments == ((1, "Ask about clearly visible objects."),)
        assert updated.cap.full_text() == rubrics.cap.full_text()
        assert updated.vg.full_text() == rubrics.vg.full_text()

    def test_duplicate_refinement_skipped_and_logged(self, caplog):
        rubrics = apply_refinement(
            default_rubrics(), RefinementAction("d", "vg", "Same idea."), iteration=1
        )
        with caplog.at_level(logging.WARNING, logger="autovqa.optimizer"):
            again = apply_refinement(
                rubrics, RefinementAction("d", "vg", "Same idea."), iteration=2
            )
        assert again == rubrics
        assert again.version == rubrics.version
        assert any("duplicate refinement" in r.message for r in caplog.records)

    def test_all_targets_amends_every_rubric(self):
        action = RefinementAction("d", "vqa", "Shared fix.")
        updated = apply_refinement(default_rubrics(), action, iteration=1, all_targets=True)
        assert updated.version == 3
        for key in ("cap", "vqa", "vg"):
            assert updated.get(key).amendments == ((1, "Shared fix."),)

    def test_all_targets_skips_only_duplicates(self):
        rubrics = apply_refinement(
            default_rubrics(), RefinementAction("d", "cap", "Shared fix."), iteration=1
        )
        updated = apply_refinement(
            rubrics, RefinementAction("d", "vqa", "Shared fix."), iteration=2, all_targets=True
        )
        assert updated.version == 3
        assert updated.cap.amendments == ((1, "Shared fix."),)
        assert updated.vqa.amendments == ((2, "Shared fix."),)
        assert updated.vg.amendments == ((2, "Shared fix."),)

    def test_iteration_validated(self):
        action = RefinementAction("d", "cap", "r")
        with pytest.raises(ValueError):
            apply_refinement(default_rubrics(), action, iteration=0)
        with pytest.raises(ValueError):
            apply_refinement(default_rubrics(), action, iteration=True)
