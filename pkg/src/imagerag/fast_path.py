"""Fast path: phrase-to-patch similarity and cue selection.

The similarity table is the row-wise softmax of gamma-scaled cosines between
text rows and patch columns; the softmaxed entries are the cue confidences.
Selection combines the two most frequently retrieved patches (membership in
per-row top-5) with every row's argmax, keeps the highest-confidence
candidates, and applies the confidence threshold last.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionMismatchError
from .imaging import DivisionMethod, ImageRef, PatchSpec, whole_image_patch
from .query import KeyPhraseSet

logger = logging.getLogger(__name__)

TOP_MEMBERSHIP = 5  # rows "vote" for their top-5 patches
FREQUENT_PATCHES = 2


class CuePath:
    FAST = "fast"
    SLOW = "slow"


@dataclass(frozen=True)
class VisualCue:
    patch: PatchSpec
    confidence: float
    matched_by: str
    path: str = CuePath.FAST

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise DataError(f"cue confidence {self.confidence} outside [0, 1]")


@dataclass
class SimilarityMatrix:
    row_labels: list[str]
    col_ids: list[str]
    raw: np.ndarray        # n x m cosines in [-1, 1]
    softmaxed: np.ndarray  # n x m row-stochastic
    gamma: float
    degenerate: bool = False
    whole_image_col: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def build_similarity(
    phrase_vecs: np.ndarray,
    patch_vecs: np.ndarray,
    gamma: float,
    row_labels: list[str] | None = None,
    col_ids: list[str] | None = None,
    whole_image_col: int | None = None,
) -> SimilarityMatrix:
    """raw[i, j] = <phrase_i, patch_j>; softmaxed row i = softmax(gamma * raw[i])."""
    phrase_vecs = np.asarray(phrase_vecs, dtype=np.float64)
    patch_vecs = np.asarray(patch_vecs, dtype=np.float64)
    if phrase_vecs.ndim != 2 or patch_vecs.ndim != 2:
        raise DataError("expected 2-D stacks of row vectors")
    if phrase_vecs.shape[1] != patch_vecs.shape[1]:
        raise DimensionMismatchError(
            f"text dim {phrase_vecs.shape[1]} != image dim {patch_vecs.shape[1]}"
        )
    n, m = phrase_vecs.shape[0], patch_vecs.shape[0]
    if n < 1 or m < 1:
        raise DataError("similarity needs at least one row and one column")
    degenerate = m == 1
    if degenerate:
        logger.warning("similarity over a single patch column is degenerate")
    raw = phrase_vecs @ patch_vecs.T
    soft = softmax_rows(gamma * raw)
    return SimilarityMatrix(
        row_labels=row_labels or [f"row{i}" for i in range(n)],
        col_ids=col_ids or [f"col{j}" for j in range(m)],
        raw=raw,
        softmaxed=soft,
        gamma=gamma,
        degenerate=degenerate,
        whole_image_col=whole_image_col,
    )


def _row_top_membership(matrix: SimilarityMatrix, row: int, k: int) -> list[int]:
    order = sorted(
        range(len(matrix.col_ids)),
        key=lambda j: (-matrix.softmaxed[row, j], j),
    )
    return order[:k]


def rank_candidates(matrix: SimilarityMatrix, max_cues: int) -> list[tuple[int, float, int]]:
    """Candidate (col, confidence, best_row) triples, highest confidence first.

    Candidates are the two most frequent per-row top-5 patches plus every
    row's argmax; confidence is the column's max softmaxed entry. Ties break
    by higher raw similarity, then earlier patch order.
    """
    n, m = matrix.shape
    top_k = min(TOP_MEMBERSHIP, m)
    freq = np.zeros(m, dtype=int)
    for i in range(n):
        for j in _row_top_membership(matrix, i, top_k):
            freq[j] += 1
    col_conf = matrix.softmaxed.max(axis=0)
    col_raw = matrix.raw.max(axis=0)
    voted = [j for j in range(m) if freq[j] > 0]
    voted.sort(key=lambda j: (-freq[j], -col_conf[j], j))
    frequent = voted[:FREQUENT_PATCHES]
    argmaxes = [_row_top_membership(matrix, i, 1)[0] for i in range(n)]
    candidates = []
    seen: set[int] = set()
    for j in frequent + argmaxes:
        if j not in seen:
            seen.add(j)
            candidates.append(j)
    candidates.sort(key=lambda j: (-col_conf[j], -col_raw[j], j))
    best_rows = matrix.softmaxed.argmax(axis=0)
    picked = candidates[:max_cues]
    return [(j, float(col_conf[j]), int(best_rows[j])) for j in picked]


def select_cues_fast(
    matrix: SimilarityMatrix,
    epsilon: float,
    max_cues: int = 5,
    patches: list[PatchSpec] | None = None,
    apply_epsilon: bool = True,
) -> list[VisualCue]:
    """Apply the fast selection rule; empty output is the slow-path signal.

    ``apply_epsilon=False`` (force-output mode) returns the unfiltered
    candidate ranking. A selected whole-image pseudo-column never becomes a
    cue; it is logged and dropped.
    """
    if not (0.0 <= epsilon <= 1.0):
        raise DataError("epsilon must lie in [0, 1]")
    if max_cues < 1:
        raise DataError("max_cues must be >= 1")
    triples = rank_candidates(matrix, max_cues)
    cues = []
    for j, conf, row in triples:
        if apply_epsilon and conf < epsilon:
            continue
        if matrix.whole_image_col is not None and j == matrix.whole_image_col:
            logger.info(
                "whole-image column selected (confidence %.4f); dropped from cues", conf
            )
            continue
        patch = patches[j] if patches is not None else None
        if patch is None:
            patch = PatchSpec(
                image_id="matrix",
                box=_index_box(j),
                scale_level=0,
                method=DivisionMethod.WHOLE_IMAGE,
            )
        cues.append(
            VisualCue(
                patch=patch,
                confidence=conf,
                matched_by=matrix.row_labels[row],
                path=CuePath.FAST,
            )
        )
    return cues


def _index_box(j: int):
    # Placeholder geometry for matrix-only tests (1px-wide column markers).
    from .imaging import Box

    return Box(j, 0, j + 1, 1)


@dataclass(frozen=True)
class FastInputs:
    """Rows and columns of the fast similarity matrix."""

    phrase_rows: tuple[str, ...]
    combined_row: str | None
    col_patches: tuple[PatchSpec, ...]
    whole_image_col: int

    @property
    def row_labels(self) -> list[str]:
        labels = list(self.phrase_rows)
        if self.combined_row is not None:
            labels.append(self.combined_row)
        return labels


def assemble_fast_inputs(
    phrases: KeyPhraseSet, patches: list[PatchSpec], image: ImageRef
) -> FastInputs:
    """Rows: each phrase plus the combined all-phrase sentence (deduplicated).
    Columns: each patch plus exactly one whole-image pseudo-patch."""
    if not patches:
        raise DataError("cannot assemble inputs without patches")
    folded = {p.casefold() for p in phrases.phrases}
    combined = phrases.combined_sentence
    combined_row = combined if combined.casefold() not in folded else None
    cols = list(patches)
    whole_idx = next(
        (i for i, p in enumerate(cols) if p.method == DivisionMethod.WHOLE_IMAGE), None
    )
    if whole_idx is None:
        cols.append(whole_image_patch(image))
        whole_idx = len(cols) - 1
    return FastInputs(
        phrase_rows=tuple(phrases.phrases),
        combined_row=combined_row,
        col_patches=tuple(cols),
        whole_image_col=whole_idx,
    )


def dump_matrix(matrix: SimilarityMatrix, path) -> None:
    """Debug dump: row/col descriptors plus the softmaxed float table."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# gamma=%r degenerate=%s\n" % (matrix.gamma, matrix.degenerate))
        fh.write("\t" + "\t".join(matrix.col_ids) + "\n")
        for label, row in zip(matrix.row_labels, matrix.softmaxed):
            fh.write(label + "\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")
