"""Command-line front end: precompute, ask, eval, ingest, report.

Exit codes: 0 success, 1 usage error, 2 provider failure, 3 data error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import PipelineConfig
from .errors import DataError, ProviderError
from .evaluation import EvalTask, load_benchmark, run_task
from .imaging import DivisionMethod, load_image, whole_image_patch, write_patch_list
from .pipeline import Pipeline
from .query import Question, TaskKind
from .report import render_report
from .store import DB_CRSD, DB_LRSD, VectorStore, read_ingest_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROVIDER = 2
EXIT_DATA = 3


def _load_config(config_path: str | None, overrides: dict) -> PipelineConfig:
    config = PipelineConfig.load(config_path) if config_path else PipelineConfig()
    for key, value in overrides.items():
        if value is None:
            continue
        if not hasattr(config, key):
            raise DataError(f"unknown config field {key!r}")
        setattr(config, key, value)
    return config


@click.group()
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.argument("images", nargs=-1, required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--division", type=str, default=None, help="Override division method.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Directory for patch lists (defaults next to caches).")
def precompute(images, config_path, division, out_dir):
    """Divide images, embed every patch, and fill the embedding caches."""
    config = _load_config(config_path, {"division_method": division})
    pipeline = Pipeline.from_config(config)
    total_new = 0
    failures = 0
    for path in images:
        try:
            image = pipeline.get_image(path)
            patches = pipeline.divide_image(image)
            cols = patches + [whole_image_patch(image)]
            cache = pipeline.gateway.cache
            before = cache.load(
                cache.file_for(image.id, patches[0].method.value, config.encoder.profile)
            )
            known = set(before)
            vec_map = pipeline.gateway.embed_patches(image, cols)
            new = sum(1 for pid in vec_map if pid not in known)
            total_new += new
            list_dir = Path(out_dir) if out_dir else cache.root
            list_dir.mkdir(parents=True, exist_ok=True)
            write_patch_list(
                list_dir / f"{image.id}__{patches[0].method.value}.patches.tsv", cols
            )
            click.echo(f"{path}: {len(cols)} patches, {new} newly embedded")
        except (DataError, ProviderError) as exc:
            failures += 1
            logger.error("precompute failed for %s: %s", path, exc)
    click.echo(f"done: {total_new} new embeddings, {failures} failures")


@cli.command()
@click.argument("image_path", type=click.Path(exists=True))
@click.argument("question_text")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--option", "options", multiple=True,
              help="Answer option as LETTER=TEXT; repeatable.")
@click.option("--question-id", default="q0")
@click.option("--force-output", is_flag=True, default=None,
              help="Emit cues even below the confidence threshold.")
@click.option("--no-generation", is_flag=True, help="Retrieval only, skip the MLLM.")
@click.option("--trace-file", type=click.Path(), default=None,
              help="Append the trace line to this file.")
@click.option("--dump-matrix", type=click.Path(), default=None,
              help="Write the fast similarity table to this debug file.")
def ask(image_path, question_text, config_path, options, question_id,
        force_output, no_generation, trace_file, dump_matrix):
    """Answer one question about one image."""
    config = _load_config(config_path, {})
    if force_output:
        config.force_output = True
    parsed_options = []
    for opt in options:
        if "=" not in opt:
            raise click.UsageError(f"option {opt!r} must look like LETTER=TEXT")
        letter, text = opt.split("=", 1)
        parsed_options.append((letter.strip(), text.strip()))
    question = Question(
        question_id=question_id,
        text=question_text,
        options=tuple(parsed_options),
        task_kind=TaskKind.OTHER,
    )
    pipeline = Pipeline.from_config(config)
    image = pipeline.get_image(image_path)
    result = pipeline.ask(image, question, with_generation=not no_generation)
    click.echo(f"path: {result.retrieval.path}")
    click.echo(f"keyphrases: {', '.join(result.retrieval.phrases.phrases)}")
    for i, cue in enumerate(result.retrieval.cues, 1):
        b = cue.patch.box
        click.echo(
            f"cue {i}: {b.as_tuple()} confidence={cue.confidence:.4f} "
            f"matched={cue.matched_by!r}"
        )
    if not result.retrieval.cues:
        click.echo("cues: none (answering without retrieval augmentation)")
    if result.answer is not None:
        click.echo(f"answer: {result.answer.letter or 'Unparsed'}")
        click.echo(
            f"timing: retrieval={result.retrieval.elapsed:.3f}s "
            f"generation={result.generation_elapsed:.3f}s"
        )
    if trace_file:
        with open(trace_file, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(result.trace, sort_keys=True) + "\n")
    if dump_matrix and result.retrieval.matrix is not None:
        from .fast_path import dump_matrix as write_matrix

        write_matrix(result.retrieval.matrix, dump_matrix)


@cli.command("eval")
@click.argument("task", type=click.Choice([t.value for t in EvalTask]))
@click.argument("dataset", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default="eval_out")
@click.option("--workers", type=int, default=None)
@click.option("--recall-k", type=int, default=3)
@click.option("--threshold", "thresholds", type=float, multiple=True,
              help="IoU threshold(s) for cue retrieval; default 0.1 and 0.3.")
@click.option("--roi-multiplier", type=float, default=None,
              help="ROI enlargement factor for the inferring task.")
def eval_cmd(task, dataset, config_path, out_dir, workers, recall_k, thresholds,
             roi_multiplier):
    """Run one of the three benchmark tasks and write report files."""
    config = _load_config(config_path, {})
    if workers is not None:
        config.workers = workers
    if roi_multiplier is not None:
        config.roi_multiplier = roi_multiplier
    items = load_benchmark(dataset)
    pipeline = Pipeline.from_config(config)
    report = run_task(
        EvalTask(task),
        items,
        pipeline,
        out_dir,
        recall_k=recall_k,
        thresholds=tuple(thresholds) if thresholds else (0.1, 0.3),
        workers=config.workers,
        roi_multiplier=config.roi_multiplier,
    )
    click.echo(report.human_table())
    click.echo(f"report files: {out_dir}")


@cli.command()
@click.argument("db", type=click.Choice([DB_LRSD, DB_CRSD]))
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def ingest(db, manifest, config_path):
    """Ingest a labeled/captioned corpus manifest into a vector database."""
    config = _load_config(config_path, {})
    pipeline = Pipeline.from_config(config)
    store = VectorStore(Path(config.stores_dir), db)
    items = read_ingest_manifest(manifest)
    report = store.ingest(
        items,
        pipeline.gateway.embed_image,
        pipeline.gateway.embed_sentence,
        zoom_out_ratio=config.zoom_out_ratio,
        dedup_radius=config.dedup_radius,
        max_per_key=config.max_embeddings_per_key or None,
    )
    click.echo(json.dumps(report.as_dict(), indent=2, sort_keys=True))


@cli.command()
@click.argument("traces", nargs=-1, required=False, type=click.Path())
@click.option("--out", "out_dir", type=click.Path(), default="report_out")
def report(traces, out_dir):
    """Render overlay figures and an index page from trace files."""
    existing = [t for t in traces if Path(t).exists()]
    for missing in set(traces) - set(existing):
        logger.warning("trace file %s does not exist; skipping", missing)
    index = render_report(existing, out_dir)
    click.echo(f"index: {index}")


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except ProviderError as exc:
        logger.error("provider failure: %s", exc)
        return EXIT_PROVIDER
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
