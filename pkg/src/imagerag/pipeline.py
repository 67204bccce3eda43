"""End-to-end composition: question analysis, fast/slow retrieval, generation.

One Pipeline instance owns the providers, stores, and caches described by a
PipelineConfig and exposes the per-question entry points used by the CLI and
the evaluation harness. Retrieval math is deterministic, so traces are
byte-stable for fixed inputs regardless of worker counts.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .embeddings import (
    EmbeddingCache,
    EmbeddingGateway,
    EncoderProfile,
    FixtureEncoder,
    FixtureSentenceEncoder,
    HashedEncoder,
    HashedSentenceEncoder,
    HttpEncoder,
    HttpSentenceEncoder,
    load_templates,
)
from .errors import DataError, ProviderError
from .evaluation import BenchmarkItem, EvalTask, QuestionOutcome, enlarge_roi
from .fast_path import (
    CuePath,
    FastInputs,
    VisualCue,
    assemble_fast_inputs,
    build_similarity,
    select_cues_fast,
)
from .generation import (
    Answer,
    GenerationRequest,
    HttpMLLM,
    PromptMode,
    StubMLLM,
    answer as generate_answer,
)
from .imaging import DivisionMethod, ImageRef, PatchSpec, divide, load_image
from .query import (
    HttpChatProvider,
    KeyPhraseSet,
    PhraseSource,
    Question,
    QueryAnalyzer,
    StubChatProvider,
    load_filter_words,
)
from .slow_path import Route, SlowPathTrace, route, run_slow_path
from .store import DB_CRSD, DB_LRSD, ProxyMethod, VectorStore

logger = logging.getLogger(__name__)


@dataclass
class RetrievalResult:
    cues: list[VisualCue]
    path: str  # fast | slow | none
    forced_fallback: bool
    phrases: KeyPhraseSet
    slow_trace: SlowPathTrace | None
    elapsed: float
    matrix: object | None = None  # fast SimilarityMatrix, for debug dumps


@dataclass
class AskResult:
    answer: Answer | None
    retrieval: RetrievalResult
    trace: dict
    generation_elapsed: float = 0.0


def build_gateway(config: PipelineConfig, base_dir: str | Path = ".") -> EmbeddingGateway:
    enc = config.encoder
    profile = EncoderProfile(
        name=enc.profile, dim=enc.dim, endpoint=enc.endpoint, gamma=config.gamma
    )
    base = Path(base_dir)
    if enc.endpoint.startswith(("http://", "https://")):
        encoder = HttpEncoder(enc.endpoint, enc.dim)
    elif enc.endpoint:
        manifest = Path(enc.endpoint)
        if not manifest.is_absolute():
            manifest = base / manifest
        encoder = FixtureEncoder(manifest, enc.dim)
    elif enc.profile == "hashed":
        encoder = HashedEncoder(enc.dim)
    else:
        raise DataError(
            "encoder endpoint is required (HTTP URL or fixture manifest path)"
        )
    if enc.sentence_endpoint.startswith(("http://", "https://")):
        sentence = HttpSentenceEncoder(enc.sentence_endpoint)
    elif enc.sentence_endpoint:
        manifest = Path(enc.sentence_endpoint)
        if not manifest.is_absolute():
            manifest = base / manifest
        sentence = FixtureSentenceEncoder(manifest)
    else:
        sentence = HashedSentenceEncoder()
    templates = load_templates(enc.templates_file or None)
    cache_dir = Path(config.cache_dir)
    if not cache_dir.is_absolute():
        cache_dir = base / cache_dir
    return EmbeddingGateway(
        profile=profile,
        encoder=encoder,
        sentence_encoder=sentence,
        cache=EmbeddingCache(cache_dir),
        templates=templates,
        parallelism=enc.parallelism,
    )


class Pipeline:
    """Bundles config, gateway, analyzer, stores, and the answering model."""

    def __init__(
        self,
        config: PipelineConfig,
        gateway: EmbeddingGateway,
        analyzer: QueryAnalyzer,
        lrsd: VectorStore | None = None,
        crsd: VectorStore | None = None,
        mllm=None,
    ):
        self.config = config
        self.gateway = gateway
        self.analyzer = analyzer
        self.lrsd = lrsd
        self.crsd = crsd
        self.mllm = mllm
        self._images: dict[str, ImageRef] = {}
        self._images_lock = threading.Lock()

    @classmethod
    def from_config(cls, config: PipelineConfig, base_dir: str | Path = ".") -> "Pipeline":
        config.apply_env()
        gateway = build_gateway(config, base_dir)
        if config.llm.url:
            llm = HttpChatProvider(
                config.llm.url,
                config.llm.model,
                temperature=config.llm.temperature,
                top_p=config.llm.top_p,
                max_tokens=config.llm.max_tokens,
            )
        elif config.llm.stub_replies:
            stub_path = Path(config.llm.stub_replies)
            if not stub_path.is_absolute():
                stub_path = Path(base_dir) / stub_path
            llm = StubChatProvider(stub_path)
        else:
            llm = None
        filter_words = (
            load_filter_words(config.filter_words_file)
            if config.filter_words_file
            else load_filter_words()
        )
        analyzer = QueryAnalyzer(
            provider=llm,
            sentence_embed=gateway.embed_sentence,
            filter_words=filter_words,
            max_retries=config.llm.max_retries,
        )
        stores_dir = Path(config.stores_dir)
        if not stores_dir.is_absolute():
            stores_dir = Path(base_dir) / stores_dir
        lrsd = VectorStore(stores_dir, DB_LRSD) if (stores_dir / DB_LRSD).exists() else None
        crsd = VectorStore(stores_dir, DB_CRSD) if (stores_dir / DB_CRSD).exists() else None
        if config.mllm.url:
            mllm = HttpMLLM(config.mllm.url, config.mllm.model, retries=config.mllm.retries)
        elif config.mllm.stub_replies:
            stub_path = Path(config.mllm.stub_replies)
            if not stub_path.is_absolute():
                stub_path = Path(base_dir) / stub_path
            mllm = StubMLLM(stub_path)
        else:
            mllm = None
        return cls(config, gateway, analyzer, lrsd=lrsd, crsd=crsd, mllm=mllm)

    # -- building blocks -----------------------------------------------------

    def get_image(self, path: str, image_id: str | None = None) -> ImageRef:
        with self._images_lock:
            cached = self._images.get(path)
        if cached is not None:
            return cached
        image = load_image(path, image_id)
        with self._images_lock:
            self._images.setdefault(path, image)
        return image

    def divide_image(self, image: ImageRef) -> list[PatchSpec]:
        cfg = self.config
        method = DivisionMethod(cfg.division_method)
        params = {
            DivisionMethod.VIT: {"tile_size": cfg.vit_tile},
            DivisionMethod.CASCADE_GRID: {"n": cfg.cascade_n},
            DivisionMethod.COMPLETE_COVER: {"scale_param": cfg.cover_scale},
            DivisionMethod.WHOLE_IMAGE: {},
        }[method]
        return divide(image, method, **params)

    def division_param(self) -> int:
        cfg = self.config
        return {
            "vit": cfg.vit_tile,
            "cascade_grid": cfg.cascade_n,
            "complete_cover": cfg.cover_scale,
            "whole_image": 0,
        }[cfg.division_method]

    # -- retrieval --------------------------------------------------------------

    def run_retrieval(
        self, image: ImageRef, question: Question, *, force_output: bool | None = None
    ) -> RetrievalResult:
        cfg = self.config
        force = cfg.force_output if force_output is None else force_output
        start = time.monotonic()
        phrases = self.analyzer.extract(question)
        patches = self.divide_image(image)
        inputs = assemble_fast_inputs(phrases, patches, image)
        vec_map = self.gateway.embed_patches(image, list(inputs.col_patches))
        patch_matrix = np.stack([vec_map[p.patch_id] for p in inputs.col_patches])
        phrase_vectors = {
            p: self.gateway.embed_text_ensemble(p) for p in inputs.phrase_rows
        }
        row_vectors = [phrase_vectors[p] for p in inputs.phrase_rows]
        if inputs.combined_row is not None:
            row_vectors.append(self.gateway.embed_text_raw(inputs.combined_row))
        matrix = build_similarity(
            np.stack(row_vectors),
            patch_matrix,
            cfg.gamma,
            row_labels=inputs.row_labels,
            col_ids=[p.patch_id for p in inputs.col_patches],
            whole_image_col=inputs.whole_image_col,
        )
        col_patches = list(inputs.col_patches)
        fast_filtered = select_cues_fast(
            matrix, cfg.epsilon, cfg.max_fast_cues, patches=col_patches
        )
        decision = route(fast_filtered)
        slow_trace: SlowPathTrace | None = None
        forced_fallback = False
        if decision == Route.USE_FAST:
            path = CuePath.FAST
            if force:
                cues = select_cues_fast(
                    matrix, cfg.epsilon, cfg.max_fast_cues,
                    patches=col_patches, apply_epsilon=False,
                )
            else:
                cues = fast_filtered
        else:
            cues, slow_trace = run_slow_path(
                list(phrases.phrases),
                phrase_vectors,
                patch_matrix,
                col_patches,
                self.lrsd,
                self.crsd,
                self.gateway.embed_sentence,
                gamma=cfg.gamma,
                delta1=cfg.delta1,
                delta2=cfg.delta2,
                proxy_method=ProxyMethod(cfg.proxy_method),
                dbscan_eps=cfg.dbscan_eps,
                dbscan_min_samples=cfg.dbscan_min_samples,
                max_cues=cfg.max_slow_cues,
                epsilon=cfg.epsilon if cfg.slow_epsilon_filter else None,
                whole_image_col=inputs.whole_image_col,
            )
            path = CuePath.SLOW if cues else "none"
            if not cues and force:
                # Forced mode never leaves the output void: back-fill with the
                # unfiltered fast candidates.
                cues = select_cues_fast(
                    matrix, cfg.epsilon, cfg.max_fast_cues,
                    patches=col_patches, apply_epsilon=False,
                )
                forced_fallback = True
        elapsed = time.monotonic() - start
        return RetrievalResult(
            cues=cues,
            path=path,
            forced_fallback=forced_fallback,
            phrases=phrases,
            slow_trace=slow_trace,
            elapsed=elapsed,
            matrix=matrix,
        )

    def prewarm(self, item: BenchmarkItem) -> None:
        """Load the item's image outside any timed region."""
        self.get_image(item.image_path)

    # -- trace assembly ----------------------------------------------------------

    def _trace_dict(
        self,
        question: Question,
        image: ImageRef,
        retrieval: RetrievalResult,
        answer_obj: Answer | None,
        *,
        task: str,
        truth: tuple[str, ...] | None = None,
        roi=None,
        image_path: str | None = None,
    ) -> dict:
        slow = retrieval.slow_trace.as_dict() if retrieval.slow_trace else None
        return {
            "question_id": question.question_id,
            "task": task,
            "image": image.id,
            "image_path": image_path,
            "division": {
                "method": self.config.division_method,
                "param": self.division_param(),
            },
            "keyphrases": list(retrieval.phrases.phrases),
            "keyphrase_source": retrieval.phrases.source.value,
            "path": retrieval.path,
            "forced_fallback": retrieval.forced_fallback,
            "cues": [
                {
                    "patch_id": c.patch.patch_id,
                    "box": list(c.patch.box.as_tuple()),
                    "confidence": c.confidence,
                    "matched_by": c.matched_by,
                    "path": c.path,
                }
                for c in retrieval.cues
            ],
            "slow": slow,
            "answer": answer_obj.letter if answer_obj else None,
            "truth": list(truth) if truth else None,
            "roi": list(roi.as_tuple()) if roi else None,
            "seed": self.config.seed,
        }

    # -- entry points ---------------------------------------------------------------

    def ask(
        self,
        image: ImageRef,
        question: Question,
        *,
        with_generation: bool = True,
        force_output: bool | None = None,
    ) -> AskResult:
        retrieval = self.run_retrieval(image, question, force_output=force_output)
        answer_obj: Answer | None = None
        gen_elapsed = 0.0
        if with_generation:
            if self.mllm is None:
                raise ProviderError(
                    "no answering model configured (set mllm.url or mllm.stub_replies)"
                )
            request = GenerationRequest(
                image=image,
                cues=tuple(retrieval.cues),
                question=question,
                prompt_mode=PromptMode(self.config.prompt_mode),
            )
            t0 = time.monotonic()
            answer_obj = generate_answer(request, self.mllm, key=question.question_id)
            gen_elapsed = time.monotonic() - t0
        trace = self._trace_dict(
            question, image, retrieval, answer_obj, task="ask",
            image_path=image.source,
        )
        return AskResult(
            answer=answer_obj,
            retrieval=retrieval,
            trace=trace,
            generation_elapsed=gen_elapsed,
        )

    def run_benchmark_item(
        self, item: BenchmarkItem, task: EvalTask, *, roi_multiplier: float = 1.0
    ) -> QuestionOutcome:
        image = self.get_image(item.image_path, image_id=None)
        question = item.question
        if task == EvalTask.INFERRING_VQA:
            assert item.roi is not None  # run_task skips roi-less items first
            box = enlarge_roi(item.roi, roi_multiplier, image.width, image.height)
            cue = VisualCue(
                patch=PatchSpec(image.id, box, 0, DivisionMethod.ROI),
                confidence=1.0,
                matched_by="roi",
                path=CuePath.SLOW,
            )
            retrieval = RetrievalResult(
                cues=[cue], path="roi", forced_fallback=False,
                phrases=KeyPhraseSet(
                    phrases=(question.text,),
                    source=PhraseSource.FALLBACK,
                    combined_sentence=question.text,
                    degraded=True,
                ),
                slow_trace=None, elapsed=0.0,
            )
            answer_obj = self._generate_for(item, retrieval)
            trace = self._trace_dict(
                question, image, retrieval, answer_obj, task=task.value,
                truth=item.truth, roi=item.roi, image_path=item.image_path,
            )
            return QuestionOutcome(
                item=item, cues=retrieval.cues, path=retrieval.path,
                predicted=answer_obj.letter if answer_obj else None,
                trace=trace, latency=0.0,
            )
        force = True if task == EvalTask.CUE_RETRIEVAL else None
        retrieval = self.run_retrieval(image, question, force_output=force)
        answer_obj: Answer | None = None
        if task == EvalTask.REGULAR_VQA:
            answer_obj = self._generate_for(item, retrieval)
        trace = self._trace_dict(
            question, image, retrieval, answer_obj, task=task.value,
            truth=item.truth, roi=item.roi, image_path=item.image_path,
        )
        return QuestionOutcome(
            item=item, cues=retrieval.cues, path=retrieval.path,
            predicted=answer_obj.letter if answer_obj else None,
            trace=trace, latency=0.0,
        )

    def _generate_for(self, item: BenchmarkItem, retrieval: RetrievalResult) -> Answer:
        if self.mllm is None:
            raise ProviderError(
                "no answering model configured (set mllm.url or mllm.stub_replies)"
            )
        image = self.get_image(item.image_path)
        request = GenerationRequest(
            image=image,
            cues=tuple(retrieval.cues),
            question=item.question,
            prompt_mode=PromptMode(self.config.prompt_mode),
        )
        return generate_answer(request, self.mllm, key=item.question.question_id)
