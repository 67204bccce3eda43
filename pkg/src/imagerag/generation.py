"""Prompt assembly for the answering model and reply parsing.

A prompt payload is an ordered list of parts: the global image, one
coordinate-tagged sub-image per cue (confidence-descending), and the
question block. Rendering is a pure function of the request, which keeps
golden-file comparisons byte-stable.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import DataError, ProviderError
from .fast_path import VisualCue
from .imaging import Box, ImageRef, crop
from .query import Question

logger = logging.getLogger(__name__)

ANSWER_INSTRUCTION = (
    "Select the best answer to the above multiple-choice question based on "
    "the image. Respond with only the letter (A, B, C, D, or E) of the "
    "correct option."
)
COT_ANSWER_INSTRUCTION = (
    "Select the best answer to the above multiple-choice question based on "
    "the image. Provide the thinking process and give the response in the "
    "end with the letter (A, B, C, D, or E) of the correct option."
)
CUE_PREAMBLE = "Additional information:"
CUE_EPILOGUE = (
    "Look at the image and answer the question based on the provided "
    "additional information (location of sub-patches)."
)


class PromptMode(str, Enum):
    PLAIN = "plain"
    COT = "cot"


@dataclass(frozen=True)
class PromptPart:
    kind: str  # "text" | "image"
    text: str = ""
    pixels: np.ndarray | None = field(default=None, compare=False)


@dataclass(frozen=True)
class PromptPayload:
    parts: tuple[PromptPart, ...]

    def render_text(self) -> str:
        """Textual form with <image> placeholders; used for golden files."""
        return "".join(
            "<image>" if p.kind == "image" else p.text for p in self.parts
        )

    def images(self) -> list[np.ndarray]:
        return [p.pixels for p in self.parts if p.kind == "image"]


@dataclass(frozen=True)
class GenerationRequest:
    image: ImageRef
    cues: tuple[VisualCue, ...]
    question: Question
    prompt_mode: PromptMode = PromptMode.PLAIN


@dataclass(frozen=True)
class Answer:
    letter: str | None  # None means the reply had no standalone letter
    raw_text: str
    latency: float = 0.0

    @property
    def parsed(self) -> bool:
        return self.letter is not None


def _question_block(question: Question, mode: PromptMode) -> str:
    lines = [question.text]
    for letter, text in question.options:
        lines.append(f"({letter}) {text}")
    instruction = (
        COT_ANSWER_INSTRUCTION if mode == PromptMode.COT else ANSWER_INSTRUCTION
    )
    lines.append(instruction)
    return "\n".join(lines)


def ordered_cues(cues: tuple[VisualCue, ...] | list[VisualCue]) -> list[VisualCue]:
    # Confidence-descending; equal confidences keep their original order.
    indexed = sorted(enumerate(cues), key=lambda t: (-t[1].confidence, t[0]))
    return [cue for _, cue in indexed]


def build_prompt(request: GenerationRequest) -> PromptPayload:
    """Render the request into ordered prompt parts.

    Cue-less requests produce the plain question prompt; cue-ful requests
    interleave one coordinate tag + sub-image per cue. Cue boxes outside the
    image are an upstream invariant breach and raise immediately.
    """
    image = request.image
    for cue in request.cues:
        cue.patch.box.validate_against(image.width, image.height)
    parts: list[PromptPart] = [PromptPart("image", pixels=_pixels_or_none(image))]
    cues = ordered_cues(request.cues)
    if cues:
        parts.append(PromptPart("text", f"\n{CUE_PREAMBLE}\n"))
        for i, cue in enumerate(cues, start=1):
            b = cue.patch.box
            tag = (
                f"Sub-patch {i} at location "
                f"<box>[[{b.x1}, {b.y1}, {b.x2}, {b.y2}]]</box>: "
            )
            parts.append(PromptPart("text", tag))
            parts.append(PromptPart("image", pixels=_crop_or_none(image, b)))
            parts.append(PromptPart("text", "\n"))
        parts.append(PromptPart("text", f"{CUE_EPILOGUE}\nQuestion:\n"))
        parts.append(
            PromptPart("text", _question_block(request.question, request.prompt_mode))
        )
    else:
        parts.append(
            PromptPart(
                "text", "\n" + _question_block(request.question, request.prompt_mode)
            )
        )
    return PromptPayload(parts=tuple(parts))


def _pixels_or_none(image: ImageRef) -> np.ndarray | None:
    return image.pixels if image.has_pixels() else None


def _crop_or_none(image: ImageRef, box: Box) -> np.ndarray | None:
    # Sub-images are re-cropped from the original at full resolution; any
    # resizing is the provider's concern.
    return crop(image, box) if image.has_pixels() else None


def parse_letter(reply: str, letters: str, mode: PromptMode) -> str | None:
    """First standalone option letter (plain) or last one (chain-of-thought,
    where reasoning precedes the choice). None when no letter is found."""
    if not letters:
        letters = "ABCDE"
    matches = re.findall(rf"\b([{re.escape(letters)}])\b", reply)
    if not matches:
        return None
    return matches[-1] if mode == PromptMode.COT else matches[0]


class StubMLLM:
    """Replays canned replies from a file (JSON: {"default": ..., <key>: ...})."""

    def __init__(self, replies: dict[str, str] | str | Path):
        if isinstance(replies, (str, Path)):
            with open(replies, encoding="utf-8") as fh:
                replies = json.load(fh)
        self.replies = dict(replies)

    def generate(self, payload: PromptPayload, key: str | None = None) -> str:
        if key is not None and key in self.replies:
            return self.replies[key]
        if "default" in self.replies:
            return self.replies["default"]
        raise ProviderError(f"stub has no reply for key {key!r} and no default")


def _b64_png(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpMLLM:
    """Multi-image chat provider (base URL from config or IMAGERAG_MLLM_URL)."""

    def __init__(self, base_url: str, model: str, timeout: float = 300.0, retries: int = 2):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.retries = retries

    def generate(self, payload: PromptPayload, key: str | None = None) -> str:
        content = []
        for part in payload.parts:
            if part.kind == "text":
                content.append({"type": "text", "text": part.text})
            else:
                if part.pixels is None:
                    raise DataError("HTTP provider needs pixel data for image parts")
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": "data:image/png;base64," + _b64_png(part.pixels)},
                    }
                )
        body = {"model": self.model, "messages": [{"role": "user", "content": content}]}
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(
                    f"{self.base_url}/chat/completions", json=body, timeout=self.timeout
                )
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last_exc = exc
                logger.warning("MLLM request attempt %d failed: %s", attempt + 1, exc)
        raise ProviderError(f"MLLM request failed after retries: {last_exc}")


def answer(request: GenerationRequest, mllm, key: str | None = None) -> Answer:
    """Send the prompt, parse the option letter, record wall latency."""
    payload = build_prompt(request)
    start = time.monotonic()
    reply = mllm.generate(payload, key=key)
    latency = time.monotonic() - start
    letter = parse_letter(reply, request.question.option_letters, request.prompt_mode)
    return Answer(letter=letter, raw_text=reply, latency=latency)
