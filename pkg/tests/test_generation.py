"""Prompt rendering (golden files), letter parsing, stub provider behavior."""

from pathlib import Path

import numpy as np
import pytest

from imagerag.errors import BoundsError, ProviderError
from imagerag.fast_path import CuePath, VisualCue
from imagerag.generation import (
    Answer,
    GenerationRequest,
    PromptMode,
    StubMLLM,
    answer,
    build_prompt,
    parse_letter,
)
from imagerag.imaging import Box, DivisionMethod, PatchSpec
from imagerag.query import Question

from conftest import make_image

DATA = Path(__file__).parent / "data"


def make_cue(box, conf, image_id="scene"):
    return VisualCue(
        patch=PatchSpec(image_id, box, 1, DivisionMethod.CASCADE_GRID),
        confidence=conf,
        matched_by="phrase",
        path=CuePath.FAST,
    )


def make_question():
    return Question(
        question_id="q1",
        text="What color is the car?",
        options=(("A", "Red"), ("B", "Blue")),
    )


class TestBuildPrompt:
    def test_plain_matches_golden(self):
        image = make_image("scene", 100, 100, seed=1)
        request = GenerationRequest(
            image=image, cues=(), question=make_question(), prompt_mode=PromptMode.PLAIN
        )
        payload = build_prompt(request)
        golden = (DATA / "golden_prompt_plain.txt").read_text(encoding="utf-8")
        assert payload.render_text() == golden
        assert len(payload.images()) == 1

    def test_cues_match_golden_and_order(self):
        image = make_image("scene", 100, 100, seed=1)
        # deliberately shuffled: ordering must be confidence-descending
        cues = (
            make_cue(Box(50, 60, 70, 80), 0.8),
            make_cue(Box(10, 20, 30, 40), 0.9),
            make_cue(Box(0, 0, 5, 5), 0.7),
        )
        request = GenerationRequest(
            image=image, cues=cues, question=make_question(),
            prompt_mode=PromptMode.PLAIN,
        )
        payload = build_prompt(request)
        golden = (DATA / "golden_prompt_cues.txt").read_text(encoding="utf-8")
        assert payload.render_text() == golden
        assert len(payload.images()) == 4  # global + 3 crops

    def test_rendering_is_pure(self):
        image = make_image("scene", 100, 100, seed=1)
        request = GenerationRequest(
            image=image,
            cues=(make_cue(Box(10, 20, 30, 40), 0.9),),
            question=make_question(),
        )
        assert build_prompt(request).render_text() == build_prompt(request).render_text()

    def test_cue_count_generalizes(self):
        image = make_image("scene", 100, 100, seed=1)
        for k in (1, 2, 4, 5):
            cues = tuple(
                make_cue(Box(i, 0, i + 10, 10), 0.9 - i * 0.01) for i in range(k)
            )
            payload = build_prompt(
                GenerationRequest(image=image, cues=cues, question=make_question())
            )
            text = payload.render_text()
            assert text.count("Sub-patch") == k
            for i in range(1, k + 1):
                assert f"Sub-patch {i} at location" in text

    def test_out_of_bounds_cue_rejected(self):
        image = make_image("scene", 50, 50, seed=1)
        request = GenerationRequest(
            image=image,
            cues=(make_cue(Box(10, 10, 60, 60), 0.9),),
            question=make_question(),
        )
        with pytest.raises(BoundsError):
            build_prompt(request)

    def test_crops_are_full_resolution(self):
        image = make_image("scene", 100, 100, seed=2)
        box = Box(10, 20, 30, 40)
        payload = build_prompt(
            GenerationRequest(
                image=image, cues=(make_cue(box, 0.9),), question=make_question()
            )
        )
        crop_part = payload.images()[1]
        assert crop_part.shape == (20, 20, 3)
        assert np.array_equal(crop_part, image.pixels[20:40, 10:30])

    def test_cot_swaps_instruction(self):
        image = make_image("scene", 100, 100, seed=1)
        payload = build_prompt(
            GenerationRequest(
                image=image, cues=(), question=make_question(),
                prompt_mode=PromptMode.COT,
            )
        )
        text = payload.render_text()
        assert "Provide the thinking process" in text
        assert "Respond with only the letter" not in text


class TestParseLetter:
    def test_bare_letter(self):
        assert parse_letter("B", "AB", PromptMode.PLAIN) == "B"

    def test_parenthesized_in_cot(self):
        assert parse_letter("The answer is (C).", "ABC", PromptMode.COT) == "C"

    def test_cot_takes_last(self):
        reply = "Considering A and B, the best option is B."
        assert parse_letter(reply, "AB", PromptMode.COT) == "B"

    def test_plain_takes_first(self):
        reply = "A. Though B also seems plausible."
        assert parse_letter(reply, "AB", PromptMode.PLAIN) == "A"

    def test_unparsed(self):
        assert parse_letter("no idea", "ABCD", PromptMode.PLAIN) is None

    def test_letters_outside_options_ignored(self):
        assert parse_letter("E", "AB", PromptMode.PLAIN) is None

    def test_lowercase_not_matched(self):
        assert parse_letter("b", "AB", PromptMode.PLAIN) is None


class TestAnswer:
    def test_stub_roundtrip(self):
        image = make_image("scene", 64, 64, seed=3)
        request = GenerationRequest(image=image, cues=(), question=make_question())
        result = answer(request, StubMLLM({"q1": "B"}), key="q1")
        assert result.letter == "B"
        assert result.latency >= 0.0

    def test_unparsed_is_value_not_error(self):
        image = make_image("scene", 64, 64, seed=3)
        request = GenerationRequest(image=image, cues=(), question=make_question())
        result = answer(request, StubMLLM({"default": "no idea"}))
        assert result.letter is None
        assert not result.parsed

    def test_stub_without_reply_raises(self):
        image = make_image("scene", 64, 64, seed=3)
        request = GenerationRequest(image=image, cues=(), question=make_question())
        with pytest.raises(ProviderError):
            answer(request, StubMLLM({}), key="missing")

    def test_stub_file_loading(self, tmp_path):
        path = tmp_path / "replies.json"
        path.write_text('{"q1": "A"}', encoding="utf-8")
        stub = StubMLLM(path)
        assert stub.generate(None, key="q1") == "A"
