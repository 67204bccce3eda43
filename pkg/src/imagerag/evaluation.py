"""Benchmark loading, geometry/retrieval metrics, and the three task runners.

Tasks:
* regular VQA — full retrieval pipeline, then generation; scored by accuracy.
* inferring VQA — retrieval bypassed; the ground-truth ROI box (optionally
  enlarged about its center) is supplied as the single cue.
* cue retrieval — retrieval in force-output mode, scored by mean recall over
  a (k, IoU-threshold) grid; no generation involved.
"""

from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import DataError
from .fast_path import VisualCue
from .imaging import Box
from .query import Question, TaskKind

logger = logging.getLogger(__name__)


class EvalTask(str, Enum):
    REGULAR_VQA = "regular_vqa"
    INFERRING_VQA = "inferring_vqa"
    CUE_RETRIEVAL = "cue_retrieval"


@dataclass(frozen=True)
class BenchmarkItem:
    question: Question
    image_path: str
    truth: tuple[str, ...]  # one or more acceptable letters
    roi: Box | None = None

    def __post_init__(self):
        letters = set(self.question.option_letters)
        if letters and not set(self.truth) <= letters:
            raise DataError(
                f"truth letters {self.truth} not among options for "
                f"{self.question.question_id!r}"
            )


def load_benchmark(path: str | Path) -> list[BenchmarkItem]:
    """Read the JSONL benchmark: one record per question with fields
    question_id, image, text, options, answer (letter or list), optional roi,
    optional task."""
    items = []
    base = Path(path).parent
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: bad JSON: {exc}")
            question = Question(
                question_id=rec["question_id"],
                text=rec["text"],
                options=tuple((l, t) for l, t in rec.get("options", [])),
                task_kind=TaskKind(rec.get("task", "other")),
            )
            answer = rec["answer"]
            truth = tuple(answer) if isinstance(answer, list) else (answer,)
            roi = Box(*rec["roi"]) if rec.get("roi") else None
            image_path = rec["image"]
            resolved = Path(image_path)
            if not resolved.is_absolute():
                resolved = base / resolved
            items.append(
                BenchmarkItem(
                    question=question,
                    image_path=str(resolved),
                    truth=truth,
                    roi=roi,
                )
            )
    return items


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    """Intersection over union with pixel-area arithmetic; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0, ix) * max(0, iy)
    union = a.area + b.area - inter
    return inter / union


def recall_at_k(cues: list[VisualCue], roi: Box, k: int, threshold: float) -> float:
    """Fraction of the first k cue slots whose IoU with the ROI reaches the
    threshold. Lists shorter than k contribute zeros: the denominator stays k.
    """
    if k < 1:
        raise DataError("k must be >= 1")
    if not (0.0 < threshold <= 1.0):
        raise DataError("threshold must lie in (0, 1]")
    hits = sum(1 for cue in cues[:k] if iou(cue.patch.box, roi) >= threshold)
    return hits / k


def mean_recall(recalls: list[float]) -> float:
    if not recalls:
        raise DataError("mean recall needs at least one question")
    return sum(recalls) / len(recalls)


def accuracy(predicted: list[str | None], truths: list[tuple[str, ...]]) -> float:
    """Correct iff the predicted letter is among the acceptable letters;
    unparsed answers never count. Denominator is all questions."""
    if len(predicted) != len(truths):
        raise DataError("predictions and truths are misaligned")
    if not predicted:
        raise DataError("accuracy needs at least one question")
    correct = sum(
        1 for pred, truth in zip(predicted, truths) if pred is not None and pred in truth
    )
    return correct / len(predicted)


def enlarge_roi(roi: Box, multiplier: float, width: int, height: int) -> Box:
    """Scale the ROI about its center, then clip to the image. The original
    ROI stays contained (clipping only removes out-of-image area)."""
    if multiplier < 1:
        raise DataError("ROI multiplier must be >= 1")
    if multiplier == 1:
        return roi
    cx = (roi.x1 + roi.x2) / 2.0
    cy = (roi.y1 + roi.y2) / 2.0
    nw = roi.width * multiplier
    nh = roi.height * multiplier
    x1 = int(round(cx - nw / 2.0))
    y1 = int(round(cy - nh / 2.0))
    x2 = x1 + int(round(nw))
    y2 = y1 + int(round(nh))
    return Box(max(0, x1), max(0, y1), min(width, x2), min(height, y2))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    task: str
    n_questions: int
    n_skipped: int = 0
    accuracy_overall: float | None = None
    accuracy_by_kind: dict[str, float] = field(default_factory=dict)
    mean_recalls: dict[str, float] = field(default_factory=dict)  # "k=3,T=0.1" -> MR
    utilization: dict[str, float] = field(default_factory=dict)
    latency_mean: float = 0.0
    latency_p50: float = 0.0
    latency_max: float = 0.0
    trace_path: str = ""
    results_path: str = ""

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "n_questions": self.n_questions,
            "n_skipped": self.n_skipped,
            "accuracy_overall": self.accuracy_overall,
            "accuracy_by_kind": self.accuracy_by_kind,
            "mean_recalls": self.mean_recalls,
            "utilization": self.utilization,
            "latency_mean": self.latency_mean,
            "latency_p50": self.latency_p50,
            "latency_max": self.latency_max,
            "trace_path": self.trace_path,
            "results_path": self.results_path,
        }

    def human_table(self) -> str:
        lines = [f"task: {self.task}", f"questions: {self.n_questions} (skipped {self.n_skipped})"]
        if self.accuracy_overall is not None:
            lines.append(f"accuracy: {self.accuracy_overall:.4f}")
            for kind, value in sorted(self.accuracy_by_kind.items()):
                lines.append(f"  {kind:<10s} {value:.4f}")
        for key, value in sorted(self.mean_recalls.items()):
            lines.append(f"mean recall [{key}]: {value:.4f}")
        if self.utilization:
            util = "  ".join(f"{k}={v:.4f}" for k, v in sorted(self.utilization.items()))
            lines.append(f"path utilization: {util}")
        lines.append(
            f"latency: mean={self.latency_mean:.4f}s p50={self.latency_p50:.4f}s "
            f"max={self.latency_max:.4f}s"
        )
        return "\n".join(lines)


@dataclass
class QuestionOutcome:
    item: BenchmarkItem
    cues: list[VisualCue]
    path: str  # fast | slow | none
    predicted: str | None
    trace: dict
    latency: float
    skipped: bool = False


def run_task(
    task: EvalTask,
    items: list[BenchmarkItem],
    pipeline,
    out_dir: str | Path,
    *,
    recall_k: int = 3,
    thresholds: tuple[float, ...] = (0.1, 0.3),
    workers: int = 1,
    roi_multiplier: float = 1.0,
) -> EvalReport:
    """Evaluate a benchmark with a bounded worker pool and write the report,
    per-question results (tab-delimited), and trace lines (JSONL).

    ``pipeline`` provides run_benchmark_item(item, task, roi_multiplier)
    returning a QuestionOutcome; aggregation is order-independent and outputs
    are written in input order, so worker count never changes the files.
    """
    if not items:
        raise DataError("empty benchmark")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    needs_roi = task in (EvalTask.INFERRING_VQA, EvalTask.CUE_RETRIEVAL)

    def evaluate(item: BenchmarkItem) -> QuestionOutcome:
        if needs_roi and item.roi is None:
            return QuestionOutcome(
                item=item, cues=[], path="none", predicted=None,
                trace={"question_id": item.question.question_id, "skipped": True},
                latency=0.0, skipped=True,
            )
        prewarm = getattr(pipeline, "prewarm", None)
        if prewarm is not None:
            prewarm(item)  # image loading stays outside the timed window
        start = time.monotonic()
        outcome = pipeline.run_benchmark_item(item, task, roi_multiplier=roi_multiplier)
        outcome.latency = time.monotonic() - start
        return outcome

    if workers <= 1:
        outcomes = [evaluate(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(evaluate, items))

    scored = [o for o in outcomes if not o.skipped]
    skipped = len(outcomes) - len(scored)
    report = EvalReport(task=task.value, n_questions=len(items), n_skipped=skipped)

    if scored:
        paths = [o.path for o in scored]
        fast = paths.count("fast") / len(paths)
        slow = paths.count("slow") / len(paths)
        # anything else (no cues, or externally supplied ROI cues) used no
        # retrieval path; the three fractions always sum to 1
        report.utilization = {"fast": fast, "slow": slow, "none": 1.0 - fast - slow}
        latencies = [o.latency for o in scored]
        report.latency_mean = sum(latencies) / len(latencies)
        report.latency_p50 = statistics.median(latencies)
        report.latency_max = max(latencies)

    if task in (EvalTask.REGULAR_VQA, EvalTask.INFERRING_VQA) and scored:
        report.accuracy_overall = accuracy(
            [o.predicted for o in scored], [o.item.truth for o in scored]
        )
        by_kind: dict[str, list[QuestionOutcome]] = {}
        for o in scored:
            by_kind.setdefault(o.item.question.task_kind.value, []).append(o)
        report.accuracy_by_kind = {
            kind: accuracy([o.predicted for o in group], [o.item.truth for o in group])
            for kind, group in by_kind.items()
        }

    if task == EvalTask.CUE_RETRIEVAL and scored:
        for threshold in thresholds:
            recalls = [
                recall_at_k(o.cues, o.item.roi, recall_k, threshold) for o in scored
            ]
            report.mean_recalls[f"k={recall_k},T={threshold:g}"] = mean_recall(recalls)

    trace_path = out_dir / "traces.jsonl"
    with open(trace_path, "w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.trace, sort_keys=True) + "\n")
    report.trace_path = str(trace_path)

    results_path = out_dir / "results.tsv"
    with open(results_path, "w", encoding="utf-8") as fh:
        fh.write("question_id\tpath\tpredicted\ttruth\tcorrect\tn_cues\tskipped\n")
        for o in outcomes:
            if o.skipped or task == EvalTask.CUE_RETRIEVAL:
                correct = ""
            else:
                correct = str(int(o.predicted is not None and o.predicted in o.item.truth))
            fh.write(
                f"{o.item.question.question_id}\t{o.path}\t{o.predicted or ''}\t"
                f"{','.join(o.item.truth)}\t{correct}\t{len(o.cues)}\t{int(o.skipped)}\n"
            )
    report.results_path = str(results_path)

    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
    return report
