"""Uniform access to text/image/sentence encoders with caching.

Three provider kinds sit behind one gateway:

* HTTP encoders speaking the POST /embed/{text,image,sentence} contract
  (base URL from config or the IMAGERAG_EMBED_URL environment variable),
* fixture encoders that replay vectors from a manifest file, so the whole
  pipeline runs without any model inference,
* whatever the cache already holds.

Every vector leaving this module is a unit-normalized float32 numpy array.
"""

from __future__ import annotations

import base64
import hashlib
import io
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .errors import DataError, DimensionMismatchError, ProviderError
from .imaging import ImageRef, PatchSpec, crop

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-5

_CACHE_MAGIC = b"IRGC"
_CACHE_VERSION = 1


def unit_normalize(vec: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm; zero vectors are rejected."""
    vec = np.asarray(vec, dtype=np.float32)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DataError("cannot normalize a zero vector")
    return (vec / norm).astype(np.float32)


def content_hash_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def content_hash_pixels(
    pixels: np.ndarray, box: tuple[int, int, int, int] = (0, 0, 0, 0)
) -> str:
    # Box coordinates are part of the key so a crop-logic change invalidates
    # stale entries even when the bytes happen to match.
    h = hashlib.sha256()
    h.update(struct.pack("<4i", *box))
    h.update(struct.pack(f"<{pixels.ndim}i", *pixels.shape))
    h.update(np.ascontiguousarray(pixels).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class EncoderProfile:
    """One image-text encoder configuration (name, dim, endpoint, logit scale)."""

    name: str = "fixture"
    dim: int = 32
    endpoint: str = ""
    gamma: float = 100.0

    def __post_init__(self):
        if self.dim < 1:
            raise DataError("encoder dim must be positive")
        if self.gamma <= 0:
            raise DataError("gamma must be positive")

    @property
    def is_fixture(self) -> bool:
        return not self.endpoint.startswith(("http://", "https://"))


# ---------------------------------------------------------------------------
# Fixture manifests: one vector per line, "key<TAB>dim<TAB>f f f ..."
# ---------------------------------------------------------------------------


def read_fixture_manifest(path: str | Path) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected key, dim, floats")
            key, dim_s, floats = parts
            vec = np.array([float(x) for x in floats.split()], dtype=np.float32)
            if len(vec) != int(dim_s):
                raise DataError(f"{path}:{lineno}: dim mismatch for key {key!r}")
            vectors[key] = unit_normalize(vec)
    return vectors


def write_fixture_manifest(path: str | Path, vectors: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, vec in vectors.items():
            floats = " ".join(repr(float(x)) for x in np.asarray(vec, dtype=np.float32))
            fh.write(f"{key}\t{len(vec)}\t{floats}\n")


class FixtureEncoder:
    """Replays image/text vectors from a manifest; keys are exact strings
    (texts for the text tower, patch ids / tags for the image tower)."""

    needs_pixels = False

    def __init__(self, manifest_path: str | Path, dim: int):
        self.vectors = read_fixture_manifest(manifest_path)
        self.dim = dim
        for key, vec in self.vectors.items():
            if len(vec) != dim:
                raise DimensionMismatchError(
                    f"fixture key {key!r} has dim {len(vec)}, profile declares {dim}"
                )

    def _lookup(self, keys: list[str]) -> np.ndarray:
        rows = []
        for key in keys:
            if key not in self.vectors:
                raise ProviderError(f"fixture manifest has no vector for key {key!r}")
            rows.append(self.vectors[key])
        return np.stack(rows)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return self._lookup(texts)

    def encode_images(self, images: list[np.ndarray], keys: list[str]) -> np.ndarray:
        return self._lookup(keys)


def _png_b64(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpEncoder:
    """Client for the /embed/text and /embed/image endpoints."""

    needs_pixels = True

    def __init__(self, base_url: str, dim: int, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.dim = dim
        self.timeout = timeout

    def _post(self, route: str, payload: dict) -> np.ndarray:
        try:
            resp = requests.post(
                f"{self.base_url}{route}", json=payload, timeout=self.timeout
            )
            resp.raise_for_status()
            body = resp.json()
        except requests.RequestException as exc:
            raise ProviderError(f"encoder request {route} failed: {exc}")
        vectors = np.asarray(body["vectors"], dtype=np.float32)
        if int(body.get("dim", vectors.shape[-1])) != self.dim:
            raise DimensionMismatchError(
                f"provider served dim {body.get('dim')}, profile declares {self.dim}"
            )
        return vectors

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return self._post("/embed/text", {"texts": texts})

    def encode_images(self, images: list[np.ndarray], keys: list[str]) -> np.ndarray:
        return self._post("/embed/image", {"images_b64": [_png_b64(p) for p in images]})


class FixtureSentenceEncoder:
    def __init__(self, manifest_path: str | Path):
        self.vectors = read_fixture_manifest(manifest_path)
        dims = {len(v) for v in self.vectors.values()}
        if len(dims) > 1:
            raise DataError("sentence fixture manifest mixes dimensions")
        self.dim = dims.pop() if dims else 0

    def encode(self, texts: list[str]) -> np.ndarray:
        rows = []
        for text in texts:
            if text not in self.vectors:
                raise ProviderError(f"sentence fixture has no vector for {text!r}")
            rows.append(self.vectors[text])
        return np.stack(rows)


def _hashed_unit_vector(seed_material: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(seed_material).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return unit_normalize(rng.standard_normal(dim).astype(np.float32))


class HashedEncoder:
    """Deterministic stand-in encoder: every input maps to a pseudo-random
    unit vector derived from its content hash. No semantics, full determinism;
    useful for development and tests that only need the plumbing."""

    needs_pixels = True

    def __init__(self, dim: int = 32):
        self.dim = dim

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return np.stack(
            [_hashed_unit_vector(b"text:" + t.encode("utf-8"), self.dim) for t in texts]
        )

    def encode_images(self, images: list[np.ndarray], keys: list[str]) -> np.ndarray:
        return np.stack(
            [
                _hashed_unit_vector(
                    b"image:" + np.ascontiguousarray(img).tobytes(), self.dim
                )
                for img in images
            ]
        )


class HashedSentenceEncoder:
    """Deterministic sentence-embedding stand-in (see HashedEncoder)."""

    def __init__(self, dim: int = 384):
        self.dim = dim

    def encode(self, texts: list[str]) -> np.ndarray:
        return np.stack(
            [_hashed_unit_vector(b"sent:" + t.encode("utf-8"), self.dim) for t in texts]
        )


class HttpSentenceEncoder:
    def __init__(self, base_url: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.dim = 0  # declared by the provider on first response

    def encode(self, texts: list[str]) -> np.ndarray:
        try:
            resp = requests.post(
                f"{self.base_url}/embed/sentence",
                json={"texts": texts},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            body = resp.json()
        except requests.RequestException as exc:
            raise ProviderError(f"sentence embed request failed: {exc}")
        vectors = np.asarray(body["vectors"], dtype=np.float32)
        if self.dim == 0:
            self.dim = int(body.get("dim", vectors.shape[-1]))
        return vectors


# ---------------------------------------------------------------------------
# Binary vector cache files
# ---------------------------------------------------------------------------


def write_vector_file(path: str | Path, dim: int, ids: list[str], matrix: np.ndarray) -> None:
    """Write header (magic, version, dim, count), the id table, then a
    contiguous row-major float32 block. Written atomically via a temp file."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    if matrix.shape != (len(ids), dim):
        raise DataError(f"matrix shape {matrix.shape} != ({len(ids)}, {dim})")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<III", _CACHE_VERSION, dim, len(ids)))
        for pid in ids:
            raw = pid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(matrix.tobytes())
    os.replace(tmp, path)


def read_vector_file(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CACHE_MAGIC:
        raise DataError(f"{path}: not a vector cache file")
    version, dim, count = struct.unpack_from("<III", blob, 4)
    if version != _CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    offset = 16
    ids = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        ids.append(blob[offset : offset + ln].decode("utf-8"))
        offset += ln
    matrix = np.frombuffer(blob, dtype=np.float32, count=count * dim, offset=offset)
    return ids, matrix.reshape(count, dim).copy()


class EmbeddingCache:
    """Directory of vector files keyed by (image or scope, method, profile)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def file_for(self, scope: str, method: str, profile: str) -> Path:
        safe = "__".join(s.replace("/", "_") for s in (scope, method, profile))
        return self.root / f"{safe}.vec"

    def lock_for(self, path: Path) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(str(path), threading.Lock())

    def load(self, path: Path) -> dict[str, np.ndarray]:
        if not path.exists():
            return {}
        ids, matrix = read_vector_file(path)
        return {pid: matrix[i] for i, pid in enumerate(ids)}

    def store(self, path: Path, dim: int, vectors: dict[str, np.ndarray]) -> None:
        ids = list(vectors)
        matrix = np.stack([vectors[i] for i in ids]) if ids else np.zeros((0, dim), np.float32)
        write_vector_file(path, dim, ids, matrix)


DEFAULT_TEMPLATES_FILE = Path(__file__).parent / "data" / "clip_templates.txt"


def load_templates(path: str | Path | None = None) -> list[str]:
    """Prompt templates, one per line, each containing a single {} slot."""
    path = Path(path) if path else DEFAULT_TEMPLATES_FILE
    templates = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                templates.append(line)
    if not templates:
        raise DataError(f"template file {path} is empty")
    return templates


class EmbeddingGateway:
    """Front door for all embedding needs of the retrieval pipeline."""

    def __init__(
        self,
        profile: EncoderProfile,
        encoder,
        sentence_encoder,
        cache: EmbeddingCache | None = None,
        templates: list[str] | None = None,
        parallelism: int = 1,
        batch_size: int = 64,
    ):
        self.profile = profile
        self.encoder = encoder
        self.sentence_encoder = sentence_encoder
        self.cache = cache
        self.templates = templates if templates is not None else ["{}"]
        self.parallelism = max(1, parallelism)
        self.batch_size = max(1, batch_size)
        self._text_memo: dict[str, np.ndarray] = {}
        self._sentence_memo: dict[str, np.ndarray] = {}
        self._image_memo: dict[str, np.ndarray] = {}
        self._memo_lock = threading.Lock()

    # -- text ---------------------------------------------------------------

    def _check_dim(self, vec: np.ndarray) -> np.ndarray:
        if len(vec) != self.profile.dim:
            raise DimensionMismatchError(
                f"vector dim {len(vec)} != profile dim {self.profile.dim}"
            )
        return vec

    def embed_text_raw(self, text: str) -> np.ndarray:
        """Encode one string with no template ensembling."""
        if not text:
            raise DataError("cannot embed empty text")
        key = "raw:" + content_hash_text(text)
        with self._memo_lock:
            hit = self._text_memo.get(key)
        if hit is not None:
            return hit
        vec = unit_normalize(self.encoder.encode_texts([text])[0])
        self._check_dim(vec)
        with self._memo_lock:
            self._text_memo[key] = vec
        return vec

    def embed_text_ensemble(self, phrase: str) -> np.ndarray:
        """Instantiate the phrase into every template, encode each, average,
        and renormalize to unit length."""
        if not phrase:
            raise DataError("cannot embed empty phrase")
        key = "ens:" + content_hash_text("\x1f".join(self.templates) + "\x1e" + phrase)
        with self._memo_lock:
            hit = self._text_memo.get(key)
        if hit is not None:
            return hit
        prompts = [t.format(phrase) for t in self.templates]
        vectors = np.asarray(self.encoder.encode_texts(prompts), dtype=np.float32)
        vectors = np.stack([unit_normalize(v) for v in vectors])
        mean = vectors.mean(axis=0)
        vec = self._check_dim(unit_normalize(mean))
        with self._memo_lock:
            self._text_memo[key] = vec
        return vec

    # -- sentences ------------------------------------------------------------

    def embed_sentence(self, text: str) -> np.ndarray:
        if not text:
            raise DataError("cannot embed empty sentence")
        key = content_hash_text(text)
        with self._memo_lock:
            hit = self._sentence_memo.get(key)
        if hit is not None:
            return hit
        vec = unit_normalize(self.sentence_encoder.encode([text])[0])
        with self._memo_lock:
            self._sentence_memo[key] = vec
        return vec

    # -- images ---------------------------------------------------------------

    def embed_image(self, pixels: np.ndarray, key: str | None = None) -> np.ndarray:
        """Embed one pixel buffer. ``key`` names the buffer for fixture lookup;
        HTTP providers ignore it. Results are memoized by content hash."""
        if pixels.size == 0:
            raise DataError("cannot embed an empty pixel buffer")
        memo_key = "img:" + (key or content_hash_pixels(pixels))
        with self._memo_lock:
            hit = self._image_memo.get(memo_key)
        if hit is not None:
            return hit
        vec = self.encoder.encode_images([pixels], [key or ""])[0]
        vec = self._check_dim(unit_normalize(vec))
        with self._memo_lock:
            self._image_memo[memo_key] = vec
        return vec

    def embed_patches(
        self, image: ImageRef, patches: list[PatchSpec]
    ) -> dict[str, np.ndarray]:
        """Embed every patch of one image, cache-aware and idempotent.

        Returns {patch_id: vector}. Patches already present in the cache file
        for (image, method, profile) are not recomputed; the file is rewritten
        only when new vectors were added.
        """
        if not patches:
            return {}
        # The whole-image pseudo-patch files under its division's cache.
        methods = {p.method.value for p in patches} - {"whole_image"}
        method = sorted(methods)[0] if len(methods) == 1 else ("mixed" if methods else "whole_image")
        path = self.cache.file_for(image.id, method, self.profile.name) if self.cache else None
        lock = self.cache.lock_for(path) if self.cache and path else threading.Lock()
        with lock:
            known = self.cache.load(path) if self.cache and path else {}
            missing = [p for p in patches if p.patch_id not in known]
            if missing:
                computed = self._embed_patch_batch(image, missing)
                known.update(computed)
                if self.cache and path:
                    self.cache.store(path, self.profile.dim, known)
        return {p.patch_id: known[p.patch_id] for p in patches}

    def _embed_patch_batch(
        self, image: ImageRef, patches: list[PatchSpec]
    ) -> dict[str, np.ndarray]:
        chunks = [
            patches[i : i + self.batch_size]
            for i in range(0, len(patches), self.batch_size)
        ]

        needs_pixels = getattr(self.encoder, "needs_pixels", True)
        if needs_pixels and not image.has_pixels():
            raise DataError(
                f"image {image.id!r} has no pixel data but the encoder needs crops"
            )

        def run_chunk(chunk: list[PatchSpec]) -> dict[str, np.ndarray]:
            if image.has_pixels():
                crops = [crop(image, p.box) for p in chunk]
            else:
                crops = [np.zeros((1, 1, 3), np.uint8) for _ in chunk]
            keys = [p.patch_id for p in chunk]
            matrix = self.encoder.encode_images(crops, keys)
            return {
                key: self._check_dim(unit_normalize(vec))
                for key, vec in zip(keys, matrix)
            }

        out: dict[str, np.ndarray] = {}
        if self.parallelism == 1 or len(chunks) == 1:
            for chunk in chunks:
                out.update(run_chunk(chunk))
        else:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                for result in pool.map(run_chunk, chunks):
                    out.update(result)
        return out
