"""Slow path: phrase -> database concept -> proxy embedding -> patch cues.

Runs only when the fast path returned nothing. Phrases query the labeled
database first; the captioned database is consulted only when that yields
no key at all. If neither database matches, the engine answers without
retrieval-augmented cues rather than inventing them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .fast_path import CuePath, SimilarityMatrix, VisualCue, build_similarity
from .imaging import PatchSpec
from .store import (
    LookupHit,
    ProxyEmbedding,
    ProxyMethod,
    VectorStore,
    proxy_clustering,
    proxy_prototype,
    proxy_reranking,
)

logger = logging.getLogger(__name__)


class Route:
    USE_FAST = "fast"
    USE_SLOW = "slow"


def route(fast_cues: list[VisualCue]) -> str:
    """Fast wins whenever it produced at least one cue."""
    return Route.USE_FAST if fast_cues else Route.USE_SLOW


class SlowOutcome:
    CUES = "cues"
    EMPTY = "empty"


@dataclass
class SlowPathTrace:
    triggered: bool = False
    lrsd_hits: list[str] = field(default_factory=list)
    crsd_hits: list[str] = field(default_factory=list)
    proxies: list[ProxyEmbedding] = field(default_factory=list)
    outcome: str = SlowOutcome.EMPTY

    def as_dict(self) -> dict:
        return {
            "triggered": self.triggered,
            "lrsd_hits": list(self.lrsd_hits),
            "crsd_hits": list(self.crsd_hits),
            "proxies": [
                {"label": p.label, "method": p.method.value, "support": p.support_count}
                for p in self.proxies
            ],
            "outcome": self.outcome,
        }


def build_proxies(
    hits: list[LookupHit],
    method: ProxyMethod,
    phrase_vectors: dict[str, np.ndarray],
    dbscan_eps: float = 0.3,
    dbscan_min_samples: int = 5,
) -> list[ProxyEmbedding]:
    """One proxy per database hit. Reranking needs the originating phrase's
    fast-path text feature; clustering falls back to the prototype when the
    record is too small for the density pass."""
    proxies = []
    for hit in hits:
        record = hit.record
        if method == ProxyMethod.PROTOTYPE:
            proxies.append(proxy_prototype(record))
        elif method == ProxyMethod.CLUSTERING:
            if record.count < dbscan_min_samples:
                logger.debug(
                    "record %r too small for clustering; using prototype",
                    record.key_text,
                )
                proxies.append(proxy_prototype(record))
            else:
                proxies.append(
                    proxy_clustering(record, eps=dbscan_eps, min_samples=dbscan_min_samples)
                )
        elif method == ProxyMethod.RERANKING:
            phrase_vec = phrase_vectors.get(hit.phrase)
            if phrase_vec is None:
                raise DataError(
                    f"no fast-path text feature recorded for phrase {hit.phrase!r}"
                )
            proxies.append(proxy_reranking(record, phrase_vec))
        else:
            raise DataError(f"unknown proxy method {method!r}")
    return proxies


def select_cues_slow(
    matrix: SimilarityMatrix,
    max_cues: int = 3,
    patches: list[PatchSpec] | None = None,
    epsilon: float | None = None,
) -> list[VisualCue]:
    """Top-``max_cues`` patches by softmaxed confidence over all proxy rows.

    Dedupe is by patch (column); ties break by raw similarity then patch
    order. The whole-image pseudo-column is dropped if selected. ``epsilon``
    is only applied when explicitly given (conservative deployment mode).
    """
    if max_cues < 1:
        raise DataError("max_cues must be >= 1")
    n, m = matrix.shape
    col_conf = matrix.softmaxed.max(axis=0)
    col_raw = matrix.raw.max(axis=0)
    best_rows = matrix.softmaxed.argmax(axis=0)
    order = sorted(range(m), key=lambda j: (-col_conf[j], -col_raw[j], j))
    cues = []
    for j in order[:max_cues]:
        conf = float(col_conf[j])
        if epsilon is not None and conf < epsilon:
            continue
        if matrix.whole_image_col is not None and j == matrix.whole_image_col:
            logger.info(
                "whole-image column selected by slow path (%.4f); dropped", conf
            )
            continue
        patch = patches[j] if patches is not None else None
        if patch is None:
            from .fast_path import _index_box
            from .imaging import DivisionMethod

            patch = PatchSpec("matrix", _index_box(j), 0, DivisionMethod.WHOLE_IMAGE)
        cues.append(
            VisualCue(
                patch=patch,
                confidence=conf,
                matched_by=matrix.row_labels[int(best_rows[j])],
                path=CuePath.SLOW,
            )
        )
    return cues


def run_slow_path(
    phrases: list[str],
    phrase_vectors: dict[str, np.ndarray],
    patch_vectors: np.ndarray,
    patches: list[PatchSpec],
    lrsd: VectorStore | None,
    crsd: VectorStore | None,
    sentence_embed,
    *,
    gamma: float,
    delta1: float = 0.3,
    delta2: float = 0.5,
    proxy_method: ProxyMethod = ProxyMethod.CLUSTERING,
    dbscan_eps: float = 0.3,
    dbscan_min_samples: int = 5,
    max_cues: int = 3,
    epsilon: float | None = None,
    whole_image_col: int | None = None,
) -> tuple[list[VisualCue], SlowPathTrace]:
    """Full slow-path pass. Returns ([], trace) when no database key matched;
    cues otherwise. The captioned database is queried only on a labeled miss.
    """
    trace = SlowPathTrace(triggered=True)
    hits: list[LookupHit] = []
    if lrsd is not None and len(lrsd) > 0:
        hits = lrsd.lookup(phrases, sentence_embed, delta1)
        trace.lrsd_hits = [h.record.key_text for h in hits]
    if not hits and crsd is not None and len(crsd) > 0:
        hits = crsd.lookup(phrases, sentence_embed, delta2)
        trace.crsd_hits = [h.record.key_text for h in hits]
    if not hits:
        trace.outcome = SlowOutcome.EMPTY
        return [], trace
    proxies = build_proxies(
        hits,
        proxy_method,
        phrase_vectors,
        dbscan_eps=dbscan_eps,
        dbscan_min_samples=dbscan_min_samples,
    )
    trace.proxies = proxies
    matrix = build_similarity(
        np.stack([p.vector for p in proxies]),
        patch_vectors,
        gamma,
        row_labels=[p.label for p in proxies],
        col_ids=[p.patch_id for p in patches],
        whole_image_col=whole_image_col,
    )
    cues = select_cues_slow(matrix, max_cues=max_cues, patches=patches, epsilon=epsilon)
    trace.outcome = SlowOutcome.CUES if cues else SlowOutcome.EMPTY
    return cues, trace
