"""Render retrieval traces as annotated figures plus a browsable index.

For each trace line: the image with cue boxes (labeled with confidence),
the ROI box when present, and the best-IoU patch of the configured division.
Outputs are PNG figures, an index.md, and a tab-delimited summary — all
read-only with respect to the inputs.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError
from .evaluation import iou
from .imaging import Box, DivisionMethod, divide, load_image

logger = logging.getLogger(__name__)

_CUE_COLORS = {"fast": "tab:orange", "slow": "tab:red", "roi": "tab:red"}


def read_traces(paths: list[str | Path]) -> list[dict]:
    traces = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    traces.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: bad trace line: {exc}")
    return traces


def _division_params(trace: dict) -> tuple[DivisionMethod, dict]:
    division = trace.get("division") or {}
    method = DivisionMethod(division.get("method", "cascade_grid"))
    param = division.get("param", 10)
    key = {
        DivisionMethod.VIT: "tile_size",
        DivisionMethod.CASCADE_GRID: "n",
        DivisionMethod.COMPLETE_COVER: "scale_param",
    }.get(method)
    return method, ({key: param} if key else {})


def _best_iou_patch(trace: dict, image, roi: Box) -> tuple[Box, float] | None:
    try:
        method, params = _division_params(trace)
        patches = divide(image, method, **params)
    except DataError:
        return None
    best = max(patches, key=lambda p: iou(p.box, roi))
    return best.box, iou(best.box, roi)


def render_trace_figure(trace: dict, out_path: Path) -> bool:
    """Draw one overlay figure; returns False when the image is unavailable."""
    image_path = trace.get("image_path")
    if not image_path or not Path(image_path).exists():
        return False
    image = load_image(image_path)
    fig, ax = plt.subplots(figsize=(8, 8 * image.height / max(1, image.width)))
    ax.imshow(image.pixels)
    ax.set_title(
        f"{trace.get('question_id', '?')}  path={trace.get('path', '?')}", fontsize=9
    )
    for i, cue in enumerate(trace.get("cues") or [], start=1):
        x1, y1, x2, y2 = cue["box"]
        color = _CUE_COLORS.get(cue.get("path", "fast"), "tab:orange")
        ax.add_patch(
            mpatches.Rectangle(
                (x1, y1), x2 - x1, y2 - y1, fill=False, edgecolor=color, linewidth=1.5
            )
        )
        ax.text(
            x1, max(0, y1 - 4), f"#{i} {cue['confidence']:.2f}",
            color=color, fontsize=7,
        )
    roi_values = trace.get("roi")
    if roi_values:
        roi = Box(*roi_values)
        ax.add_patch(
            mpatches.Rectangle(
                (roi.x1, roi.y1), roi.width, roi.height,
                fill=False, edgecolor="lime", linewidth=1.5, linestyle="--",
            )
        )
        ax.text(roi.x1, roi.y2 + 10, "ROI", color="lime", fontsize=7)
        best = _best_iou_patch(trace, image, roi)
        if best is not None:
            box, score = best
            ax.add_patch(
                mpatches.Rectangle(
                    (box.x1, box.y1), box.width, box.height,
                    fill=False, edgecolor="cyan", linewidth=1.0, linestyle=":",
                )
            )
            ax.text(box.x1, box.y1 - 4, f"best IoU {score:.2f}", color="cyan", fontsize=7)
    ax.set_axis_off()
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return True


def render_report(trace_paths: list[str | Path], out_dir: str | Path) -> Path:
    """Write figures + index.md + summary.tsv for every trace line.

    Missing images become placeholder index entries; an empty trace set still
    produces a valid (empty) index.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traces = read_traces(list(trace_paths))
    index_lines = ["# Retrieval report", ""]
    summary_path = out_dir / "summary.tsv"
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("question_id\tpath\tn_cues\ttop_confidence\tkeyphrases\tfigure\n")
        for i, trace in enumerate(traces):
            qid = trace.get("question_id", f"trace{i}")
            cues = trace.get("cues") or []
            top_conf = f"{cues[0]['confidence']:.4f}" if cues else ""
            fig_name = f"{i:04d}_{qid.replace('/', '_')}.png"
            ok = render_trace_figure(trace, out_dir / fig_name)
            phrases = "; ".join(trace.get("keyphrases") or [])
            if ok:
                index_lines.append(
                    f"- **{qid}** path={trace.get('path')} cues={len(cues)} "
                    f"phrases: {phrases} — ![{qid}]({fig_name})"
                )
            else:
                index_lines.append(
                    f"- **{qid}** path={trace.get('path')} cues={len(cues)} "
                    f"phrases: {phrases} — (image missing)"
                )
                fig_name = ""
            fh.write(
                f"{qid}\t{trace.get('path', '')}\t{len(cues)}\t{top_conf}\t"
                f"{phrases}\t{fig_name}\n"
            )
    index_path = out_dir / "index.md"
    index_path.write_text("\n".join(index_lines) + "\n", encoding="utf-8")
    logger.info("report written to %s (%d traces)", out_dir, len(traces))
    return index_path
