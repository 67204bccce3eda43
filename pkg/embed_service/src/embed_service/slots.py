"""Model slots: each serves unit-normalized vectors of a declared dimension.

Three kinds:
* ``clip`` — an image+text tower pair loaded through transformers;
* ``sentence`` — a sentence encoder loaded through sentence-transformers;
* ``hashed`` — a deterministic content-hash projection with no semantics,
  for offline development and contract tests.

Heavy imports are deferred to load time so the service (and its contract
tests) run without torch installed.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class ModelFailure(Exception):
    """Inference failed; surfaces as HTTP 503."""


def l2_normalize(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float32)
    norms = np.linalg.norm(matrix, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return matrix / norms


@dataclass(frozen=True)
class SlotSpec:
    profile: str
    kind: str  # clip | sentence | hashed
    dim: int
    weights: str = ""
    device: str = "cpu"
    role: str = ""  # image_text | sentence; defaults from kind

    @property
    def resolved_role(self) -> str:
        if self.role:
            return self.role
        return "sentence" if self.kind == "sentence" else "image_text"


class HashedSlot:
    """Deterministic stand-in: sha256 of the content seeds a random projection."""

    def __init__(self, spec: SlotSpec):
        self.spec = spec

    def _vector(self, material: bytes) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(material).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.spec.dim).astype(np.float32)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return l2_normalize(
            np.stack([self._vector(b"text:" + t.encode("utf-8")) for t in texts])
        )

    def encode_images(self, images: list[np.ndarray]) -> np.ndarray:
        return l2_normalize(
            np.stack(
                [self._vector(b"image:" + np.ascontiguousarray(im).tobytes()) for im in images]
            )
        )


class ClipSlot:
    """Image+text towers via transformers; eval mode, no grad."""

    def __init__(self, spec: SlotSpec):
        self.spec = spec
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self._torch = torch
        self.model = CLIPModel.from_pretrained(spec.weights).to(spec.device).eval()
        self.processor = CLIPProcessor.from_pretrained(spec.weights)
        served = int(self.model.config.projection_dim)
        if served != spec.dim:
            raise ValueError(
                f"slot {spec.profile!r} declares dim {spec.dim} but weights serve {served}"
            )

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        try:
            inputs = self.processor(
                text=texts, return_tensors="pt", padding=True, truncation=True
            ).to(self.spec.device)
            with torch.no_grad():
                features = self.model.get_text_features(**inputs)
        except Exception as exc:
            raise ModelFailure(f"text inference failed: {exc}")
        return l2_normalize(features.cpu().numpy())

    def encode_images(self, images: list[np.ndarray]) -> np.ndarray:
        torch = self._torch
        try:
            inputs = self.processor(images=images, return_tensors="pt").to(self.spec.device)
            with torch.no_grad():
                features = self.model.get_image_features(**inputs)
        except Exception as exc:
            raise ModelFailure(f"image inference failed: {exc}")
        return l2_normalize(features.cpu().numpy())


class SentenceSlot:
    def __init__(self, spec: SlotSpec):
        self.spec = spec
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(spec.weights, device=spec.device)
        served = int(self.model.get_sentence_embedding_dimension())
        if served != spec.dim:
            raise ValueError(
                f"slot {spec.profile!r} declares dim {spec.dim} but weights serve {served}"
            )

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        try:
            out = self.model.encode(
                texts, convert_to_numpy=True, normalize_embeddings=True
            )
        except Exception as exc:
            raise ModelFailure(f"sentence inference failed: {exc}")
        return l2_normalize(np.asarray(out, dtype=np.float32))

    def encode_images(self, images):
        raise ModelFailure("sentence slots do not embed images")


def load_slot(spec: SlotSpec):
    if spec.kind == "hashed":
        return HashedSlot(spec)
    if spec.kind == "clip":
        return ClipSlot(spec)
    if spec.kind == "sentence":
        return SentenceSlot(spec)
    raise ValueError(f"unknown slot kind {spec.kind!r}")
