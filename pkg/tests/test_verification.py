import io
import json
import random

import numpy as np
import pytest
from PIL import Image

from autovqa import (
    BBox,
    ImageDecodeError,
    ImageRef,
    MalformedVerdict,
    OutOfBounds,
    StepVerdict,
    TokenUsage,
    Verdict,
    WeightError,
    aggregate_score,
    compose_critique,
    decide_acceptance,
    evaluate_vg,
    evaluate_vqa,
    mock_script,
    parse_verdict,
    read_image_bytes,
    render_overlay,
)
from autovqa.generation import JSON_ONLY_SUFFIX
from autovqa.verification import (
    CRITIQUE_CLIP,
    VG_SCORER_SYSTEM,
    VG_VERIFIER_SYSTEM,
    VQA_SCORER_SYSTEM,
    VQA_VERIFIER_SYSTEM,
)


def _steps_reply(*scores):
    return {"steps": [{"critique": f"step {i}", "score": s} for i, s in enumerate(scores)]}


def _decode(png_bytes):
    return np.asarray(Image.open(io.BytesIO(png_bytes)).convert("RGB"))


class TestRenderOverlay:
    def test_returns_png(self, make_image):
        image = make_image()
        data = render_overlay(image, BBox(10, 10, 30, 40))
        assert data[:8] == b"\x89PNG\r\n\x1a\n"

    def test_stroke_width_small_image(self, make_image):
        # 100x100 -> stroke max(2, round(0.4)) = 2
        image = make_image(image_id="small", width=100, height=100, color=(0, 0, 0))
        arr = _decode(render_overlay(image, BBox(10, 10, 30, 40)))
        red = np.array([255, 0, 0])
        # top edge rows 10 and 11 are stroked, row 12 is not
        assert (arr[10, 20] == red).all()
        assert (arr[11, 20] == red).all()
        assert not (arr[12, 20] == red).all()

    def test_stroke_width_large_image(self, tmp_path):
        # min dim 1500 -> stroke max(2, round(6.0)) = 6
        path = tmp_path / "large.png"
        Image.new("RGB", (1600, 1500), (0, 0, 0)).save(path)
        image = ImageRef("large", str(path), 1600, 1500)
        arr = _decode(render_overlay(image, BBox(100, 100, 600, 700)))
        red = np.array([255, 0, 0])
        for row in range(100, 106):
            assert (arr[row, 300] == red).all()
        assert not (arr[106, 300] == red).all()

    def test_pixels_outside_band_untouched(self, make_image):
        rng = random.Random(73)
        image = make_image(image_id="band", width=64, height=64, color=(40, 80, 120))
        original = np.asarray(Image.open(image.path).convert("RGB")).copy()
        for _ in range(25):
            x1 = rng.randrange(0, 56)
            y1 = rng.randrange(0, 56)
            box = BBox(x1, y1, rng.randrange(x1 + 6, 65), rng.randrange(y1 + 6, 65))
            arr = _decode(render_overlay(image, box))
            # strictly interior to the stroke band (stroke = 2)
            inner = arr[box.y1 + 2 : box.y2 - 2, box.x1 + 2 : box.x2 - 2]
            assert (inner == original[box.y1 + 2 : box.y2 - 2, box.x1 + 2 : box.x2 - 2]).all()
            # everything outside the box rectangle
            mask = np.ones(arr.shape[:2], dtype=bool)
            mask[box.y1 : box.y2, box.x1 : box.x2] = False
            assert (arr[mask] == original[mask]).all()
            assert (arr[box.y1, box.x1] == [255, 0, 0]).all()

    def test_full_image_box(self, make_image):
        image = make_image(image_id="full", width=50, height=30)
        arr = _decode(render_overlay(image, BBox(0, 0, 50, 30)))
        assert (arr[0, 0] == [255, 0, 0]).all()
        assert (arr[29, 49] == [255, 0, 0]).all()

    def test_box_exceeding_extent(self, make_image):
        image = make_image(width=40, height=40)
        with pytest.raises(OutOfBounds):
            render_overlay(image, BBox(0, 0, 41, 10))

    def test_unreadable_file(self):
        with pytest.raises(ImageDecodeError):
            render_overlay(ImageRef("x", "/nonexistent/img.png", 10, 10), BBox(0, 0, 5, 5))

    def test_deterministic_bytes(self, make_image):
        image = make_image(image_id="det")
        box = BBox(5, 5, 20, 20)
        assert render_overlay(image, box) == render_overlay(image, box)


class TestParseVerdict:
    def test_happy_path(self):
        text = json.dumps(_steps_reply(0.9, 1.0))
        verdict = parse_verdict(text)
        assert [s.score for s in verdict.steps] == [0.9, 1.0]
        assert verdict.steps[0].critique == "step 0"
        assert verdict.raw_text == text

    def test_integer_scores_coerce(self):
        verdict = parse_verdict(json.dumps({"steps": [{"critique": "c", "score": 1}]}))
        assert verdict.steps[0].score == 1.0

    def test_rejects_bad_shapes(self):
        bad = [
            "not json",
            "[1, 2]",
            json.dumps({"steps": []}),
            json.dumps({"steps": [{"critique": "c"}]}),
            json.dumps({"steps": [{"score": 0.5}]}),
            json.dumps({"steps": [{"critique": "c", "score": 1.5}]}),
            json.dumps({"steps": [{"critique": "c", "score": True}]}),
            json.dumps({"steps": [{"critique": "c", "score": 0.5}] * 13}),
            json.dumps({"steps": "high"}),
        ]
        for text in bad:
            with pytest.raises(MalformedVerdict):
                parse_verdict(text)

    def test_verdict_step_count_bounds(self):
        with pytest.raises(ValueError):
            Verdict(steps=(), raw_text="")


class TestEvaluateVqa:
    def test_happy_path(self, make_image):
        image = make_image()
        script = mock_script(
            [{"role": "verifier", "reply": _steps_reply(1.0, 0.9), "usage": [60, 20]}]
        )
        verdict, usage = evaluate_vqa(
            image, "What is held?", "A phone.", script.backends().verifier
        )
        assert [s.score for s in verdict.steps] == [1.0, 0.9]
        assert usage == TokenUsage(60, 20)
        request = script.transcript[0].request
        assert request.system_text == VQA_VERIFIER_SYSTEM
        assert request.user_text == "Question: What is held?\nProposed answer: A phone."
        assert request.image_payload == read_image_bytes(image)

    def test_retry_then_fallback_zero_verdict(self, make_image):
        raw = "the model rambled " * 100
        script = mock_script([{"role": "verifier", "reply": raw, "usage": [10, 5]}] * 3)
        verdict, usage = evaluate_vqa(
            make_image(), "Q?", "A.", script.backends().verifier, retries=2
        )
        assert len(script.transcript) == 3
        assert usage == TokenUsage(30, 15)
        assert len(verdict.steps) == 1
        assert verdict.steps[0].score == 0.0
        assert verdict.steps[0].critique == raw[:CRITIQUE_CLIP]
        assert len(verdict.steps[0].critique) == CRITIQUE_CLIP
        second = script.transcript[1].request.user_text
        assert second.endswith(JSON_ONLY_SUFFIX)

    def test_score_only_mode(self, make_image):
        script = mock_script([{"role": "verifier", "reply": {"score": 0.77}, "usage": [5, 1]}])
        verdict, _ = evaluate_vqa(
            make_image(), "Q?", "A.", script.backends().verifier, score_only=True
        )
        assert script.transcript[0].request.system_text == VQA_SCORER_SYSTEM
        assert len(verdict.steps) == 1
        assert verdict.steps[0].score == 0.77
        assert verdict.steps[0].critique == ""

    def test_score_only_rejects_step_reply(self, make_image):
        # a steps-shaped reply is not a bare score; falls back to zero
        script = mock_script([{"role": "verifier", "reply": _steps_reply(0.9)}] * 3)
        verdict, _ = evaluate_vqa(
            make_image(), "Q?", "A.", script.backends().verifier, score_only=True
        )
        assert verdict.steps[0].score == 0.0

    def test_blank_question_rejected(self, make_image):
        with pytest.raises(ValueError):
            evaluate_vqa(make_image(), " ", "A.", None)


class TestEvaluateVg:
    def test_sends_overlay_not_raw_image(self, make_image):
        image = make_image(image_id="vg")
        box = BBox(10, 10, 30, 40)
        script = mock_script([{"role": "verifier", "reply": _steps_reply(0.9), "usage": [3, 1]}])
        verdict, _ = evaluate_vg(image, box, "the phone", script.backends().verifier)
        request = script.transcript[0].request
        assert request.system_text == VG_VERIFIER_SYSTEM
        assert "Region mention: the phone" in request.user_text
        assert request.image_payload == render_overlay(image, box)
        assert request.image_payload != read_image_bytes(image)
        assert verdict.steps[0].score == 0.9

    def test_score_only_system_text(self, make_image):
        script = mock_script([{"role": "verifier", "reply": {"score": 0.5}}])
        evaluate_vg(
            make_image(), BBox(0, 0, 5, 5), "m", script.backends().verifier, score_only=True
        )
        assert script.transcript[0].request.system_text == VG_SCORER_SYSTEM

    def test_blank_mention_rejected(self, make_image):
        with pytest.raises(ValueError):
            evaluate_vg(make_image(), BBox(0, 0, 5, 5), "  ", None)


class TestAggregateScore:
    def _verdict(self, *scores):
        return Verdict(
            steps=tuple(StepVerdict(f"s{i}", s) for i, s in enumerate(scores)), raw_text="r"
        )

    def test_hand_value(self):
        score = aggregate_score(self._verdict(0.8), self._verdict(0.6), 0.7, 0.3)
        assert abs(score.total - 0.74) <= 1e-9
        assert score.s_vqa == 0.8
        assert score.s_vg == 0.6

    def test_step_means(self):
        score = aggregate_score(self._verdict(1.0, 0.9), self._verdict(0.9), 0.7, 0.3)
        assert abs(score.s_vqa - 0.95) <= 1e-12
        assert abs(score.total - 0.935) <= 1e-9

    def test_permutation_invariance_bitwise(self):
        rng = random.Random(31)
        for _ in range(200):
            scores = [rng.random() for _ in range(rng.randrange(2, 9))]
            base = aggregate_score(self._verdict(*scores), self._verdict(0.5), 0.7, 0.3)
            shuffled = scores[:]
            rng.shuffle(shuffled)
            other = aggregate_score(self._verdict(*shuffled), self._verdict(0.5), 0.7, 0.3)
            assert base.s_vqa == other.s_vqa
            assert base.total == other.total

    def test_weight_validation(self):
        v = self._verdict(0.5)
        with pytest.raises(WeightError):
            aggregate_score(v, v, 0.7, 0.4)
        with pytest.raises(WeightError):
            aggregate_score(v, v, -0.2, 1.2)
        with pytest.raises(WeightError):
            aggregate_score(v, v, True, 0.0)

    def test_monotone_in_vqa_weight(self):
        low = aggregate_score(self._verdict(0.9), self._verdict(0.3), 0.5, 0.5)
        high = aggregate_score(self._verdict(0.9), self._verdict(0.3), 0.8, 0.2)
        assert high.total > low.total


class TestComposeCritique:
    def test_joins_modalities(self):
        vqa = Verdict(steps=(StepVerdict("fine question", 0.9),), raw_text="a")
        vg = Verdict(steps=(StepVerdict("loose box", 0.4),), raw_text="b")
        critique = compose_critique(vqa, vg)
        assert critique.text == "[VQA 1] fine question\n[VG 1] loose box"


class TestDecideAcceptance:
    def _score(self, total):
        from autovqa import ConsistencyScore

        return ConsistencyScore.from_parts(total, total, 0.5, 0.5)

    def test_boundary_inclusive(self):
        assert decide_acceptance(self._score(0.9), 0.9)
        assert decide_acceptance(self._score(1.0), 1.0)

    def test_below_rejects(self):
        assert not decide_acceptance(self._score(0.89), 0.9)

    def test_tau_validated(self):
        with pytest.raises(ValueError):
            decide_acceptance(self._score(0.5), 1.5)
        with pytest.raises(ValueError):
            decide_acceptance(self._score(0.5), True)
