"""Shared fixtures: deterministic images, fixture manifests, and a complete
fixture world (encoders, stores, stub providers) for pipeline-level tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from imagerag.config import EncoderSettings, LlmSettings, MllmSettings, PipelineConfig
from imagerag.embeddings import (
    EmbeddingCache,
    EmbeddingGateway,
    EncoderProfile,
    FixtureEncoder,
    FixtureSentenceEncoder,
    write_fixture_manifest,
)
from imagerag.imaging import ImageRef, divide_cascade_grid, image_from_array, whole_image_patch
from imagerag.pipeline import Pipeline
from imagerag.query import QueryAnalyzer, StubChatProvider
from imagerag.generation import StubMLLM
from imagerag.store import DB_CRSD, DB_LRSD, IngestItem, VectorStore

DIM = 16
SENT_DIM = 8


def basis(i: int, dim: int = DIM) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float32)
    v[i] = 1.0
    return v


def make_pixels(width: int, height: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


def make_image(image_id: str, width: int, height: int, seed: int = 0) -> ImageRef:
    return image_from_array(image_id, make_pixels(width, height, seed))


def save_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(pixels).save(path)


@pytest.fixture
def scene_image() -> ImageRef:
    return make_image("scene", 120, 120, seed=7)


class FixtureWorld:
    """A self-contained deterministic pipeline over one 120x120 image.

    Columns of the fast matrix (cascade n=2 plus the whole-image pseudo
    patch) carry basis vectors e0..e5; phrase vectors are engineered per
    question to hit column 3 (fast), the stores (slow), or nothing.
    """

    def __init__(self, root: Path):
        self.root = root
        self.image_pixels = make_pixels(120, 120, seed=7)
        self.image_path = root / "scene.png"
        save_png(self.image_path, self.image_pixels)
        self.image = image_from_array("scene", self.image_pixels)

        patches = divide_cascade_grid(self.image, 2)
        self.patches = patches
        self.cols = patches + [whole_image_patch(self.image)]
        self.patch3_box = patches[3].box  # second grid cell at k=2

        # --- encoder fixture manifest (image-text space, dim 16) ---
        vectors: dict[str, np.ndarray] = {}
        for i, patch in enumerate(self.cols):
            vectors[patch.patch_id] = basis(i)
        # phrases (single "{}" template, so keys are the raw phrases)
        vectors["target patch three"] = basis(3)
        vectors["target patch one"] = basis(1)
        vectors["storage tank"] = basis(10)
        vectors["pond area"] = basis(11)
        vectors["unknown thing"] = basis(12)
        # LRSD items map to e2, CRSD items to e4
        for i in range(10):
            vectors[f"tank-{i}"] = basis(2)
        for i in range(6):
            vectors[f"pond-{i}"] = basis(4)
        self.encoder_manifest = root / "encoder.fixtures"
        write_fixture_manifest(self.encoder_manifest, vectors)

        # --- sentence fixture manifest (dim 8) ---
        pond_query = np.zeros(SENT_DIM, dtype=np.float32)
        pond_query[1], pond_query[2] = 0.9, np.sqrt(1.0 - 0.81)
        sentences = {
            "storage tank": basis(0, SENT_DIM),
            "water feature": basis(1, SENT_DIM),
            "pond area": pond_query,          # 0.447 from "water feature"
            "unknown thing": basis(3, SENT_DIM),
            "target patch three": basis(4, SENT_DIM),
            "target patch one": basis(5, SENT_DIM),
        }
        self.sentence_manifest = root / "sentence.fixtures"
        write_fixture_manifest(self.sentence_manifest, sentences)

        self.templates_file = root / "templates.txt"
        self.templates_file.write_text("{}\n", encoding="utf-8")

        profile = EncoderProfile(name="fixture", dim=DIM, endpoint=str(self.encoder_manifest))
        self.gateway = EmbeddingGateway(
            profile=profile,
            encoder=FixtureEncoder(self.encoder_manifest, DIM),
            sentence_encoder=FixtureSentenceEncoder(self.sentence_manifest),
            cache=EmbeddingCache(root / "caches"),
            templates=["{}"],
        )

        # --- stores ---
        self.stores_dir = root / "stores"
        self.lrsd = VectorStore(self.stores_dir, DB_LRSD)
        self.crsd = VectorStore(self.stores_dir, DB_CRSD)
        corpus_dir = root / "corpus"
        corpus_dir.mkdir(exist_ok=True)
        lrsd_items = []
        for i in range(10):
            img_path = corpus_dir / f"tank-{i}.png"
            save_png(img_path, make_pixels(24, 24, seed=100 + i))
            lrsd_items.append(
                IngestItem(str(img_path), "storage tank", "fixture-ds", item_id=f"tank-{i}")
            )
        self.lrsd.ingest(lrsd_items, self.gateway.embed_image, self.gateway.embed_sentence)
        crsd_items = []
        for i in range(6):
            img_path = corpus_dir / f"pond-{i}.png"
            save_png(img_path, make_pixels(24, 24, seed=200 + i))
            crsd_items.append(
                IngestItem(str(img_path), "water feature", "fixture-ds", item_id=f"pond-{i}")
            )
        self.crsd.ingest(crsd_items, self.gateway.embed_image, self.gateway.embed_sentence)

    def make_pipeline(
        self,
        llm_replies: dict[str, str],
        mllm_replies: dict[str, str],
        config: PipelineConfig | None = None,
    ) -> Pipeline:
        config = config or self.config()
        analyzer = QueryAnalyzer(
            provider=StubChatProvider(llm_replies),
            sentence_embed=self.gateway.embed_sentence,
        )
        return Pipeline(
            config,
            self.gateway,
            analyzer,
            lrsd=self.lrsd,
            crsd=self.crsd,
            mllm=StubMLLM(mllm_replies),
        )

    def config(self) -> PipelineConfig:
        return PipelineConfig(
            division_method="cascade_grid",
            cascade_n=2,
            encoder=EncoderSettings(
                profile="fixture",
                dim=DIM,
                endpoint=str(self.encoder_manifest),
                sentence_endpoint=str(self.sentence_manifest),
                templates_file=str(self.templates_file),
            ),
            stores_dir=str(self.stores_dir),
            cache_dir=str(self.root / "caches"),
        )


@pytest.fixture
def world(tmp_path: Path) -> FixtureWorld:
    return FixtureWorld(tmp_path)


def write_stub_files(root: Path, llm: dict, mllm: dict) -> tuple[Path, Path]:
    llm_path = root / "llm_replies.json"
    mllm_path = root / "mllm_replies.json"
    llm_path.write_text(json.dumps(llm), encoding="utf-8")
    mllm_path.write_text(json.dumps(mllm), encoding="utf-8")
    return llm_path, mllm_path


OPTIONS = (("A", "one"), ("B", "two"), ("C", "three"), ("D", "four"))

# question text -> (stub LLM phrase reply, patch index the retrieval should hit,
# expected route). Patch index None means retrieval finds nothing real.
QUESTION_KINDS = {
    "fast3": ("find target patch three", '["target patch three"]', 3, "fast"),
    "fast1": ("find target patch one", '["target patch one"]', 1, "fast"),
    "lrsd": ("find the storage tank", '["storage tank"]', 2, "slow"),
    "crsd": ("find the pond area", '["pond area"]', 4, "slow"),
    "none": ("find the unknown thing", '["unknown thing"]', None, "none"),
}


class SyntheticBenchmark:
    """50 deterministic questions over the fixture world's single image."""

    def __init__(self, world: FixtureWorld, root: Path):
        self.world = world
        self.root = root
        kinds = (
            ["fast3"] * 12 + ["fast1"] * 8 + ["lrsd"] * 15 + ["crsd"] * 5 + ["none"] * 10
        )
        assert len(kinds) == 50
        patch_boxes = [p.box for p in world.patches]
        off_target = patch_boxes[0]  # k=1 whole-image cell: IoU with quarters = 0.25
        records = []
        self.llm_replies: dict[str, str] = {}
        self.mllm_replies: dict[str, str] = {}
        self.expected_route: dict[str, str] = {}
        for i, kind in enumerate(kinds):
            text, reply, patch_idx, expected = QUESTION_KINDS[kind]
            qid = f"bench/{kind}/{i:03d}"
            self.llm_replies[text] = reply
            self.expected_route[qid] = expected
            # every other question of a kind gets the matching ROI; the rest
            # get an off-target ROI so recalls land strictly inside (0, 1)
            if patch_idx is not None and i % 2 == 0:
                roi = patch_boxes[patch_idx]
            elif patch_idx is not None:
                roi = off_target
            else:
                roi = patch_boxes[(i * 7) % len(patch_boxes)]
            truth: list[str] | str
            if i in (10, 25):
                truth = ["B", "D"]
                self.mllm_replies[qid] = "The answer is D."
            else:
                letter = OPTIONS[i % 4][0]
                truth = letter
                self.mllm_replies[qid] = letter
            records.append(
                {
                    "question_id": qid,
                    "image": str(world.image_path),
                    "text": text,
                    "options": [list(o) for o in OPTIONS],
                    "answer": truth,
                    "roi": list(roi.as_tuple()),
                    "task": ["position", "color", "count"][i % 3],
                }
            )
        self.path = root / "benchmark.jsonl"
        with open(self.path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        self.records = records

    def pipeline(self, config: PipelineConfig | None = None) -> Pipeline:
        return self.world.make_pipeline(self.llm_replies, self.mllm_replies, config)


@pytest.fixture
def benchmark(world: FixtureWorld, tmp_path: Path) -> SyntheticBenchmark:
    return SyntheticBenchmark(world, tmp_path)
