"""Command-line entry points. The CLI stays thin: parse, call the package, map
failures to exit codes (2 input, 3 segmenter, 4 proposer, 5 detector,
6 annotation parsing, 7 port binding)."""

from __future__ import annotations

import json
import socket
import sys
from collections import Counter
from pathlib import Path

import click

from . import imageio
from .backends import build_backends
from .config import EvalOptions, load_config, load_prompt_file
from .errors import (
    AnnotationParseError,
    AnnotationSchemaError,
    ConfigError,
    FocusError,
    PipelineStageError,
)
from .evaluation import (
    difficulty_summary,
    discrepancy_report,
    ingest_coco,
    ingest_voc,
    per_image_records,
    save_cases,
    sweep,
)
from .geometry import BBox, BoxOutOfBoundsError
from .pipeline import (
    PipelineResult,
    RunError,
    VARIANT_BASELINE,
    VARIANT_FOCUS,
    batch_run,
    run_baseline_auto,
    run_pipeline,
)
from .workspace import WorkspaceLayout, new_run_id

EXIT_INPUT = 2
EXIT_ANNOTATION = 6
EXIT_BIND = 7
STAGE_EXIT = {"input": 2, "segment": 3, "propose": 4, "detect": 5, "unknown": 2}


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _parse_box(text: str) -> BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise BoxOutOfBoundsError(f"box must be x_min,y_min,x_max,y_max, got {text!r}")
    try:
        coords = [int(p.strip()) for p in parts]
    except ValueError:
        raise BoxOutOfBoundsError(f"box coordinates must be integers, got {text!r}") from None
    return BBox(*coords)


@click.group()
def main():
    """Region-isolated open-vocabulary detection pipeline."""


@main.command("run")
@click.argument("image_path", type=str)
@click.option("--box", "box_text", required=True, help="Query box as x_min,y_min,x_max,y_max.")
@click.option("--config", "config_path", type=str, default=None, help="Run config JSON file.")
@click.option("--prompt-file", type=str, default=None, help="Prompt override JSON file.")
@click.option("--mode", type=str, default=None,
              help="Isolation mode: full, rect_mask, crop, segment_mask.")
@click.option("--variant", type=click.Choice([VARIANT_FOCUS, VARIANT_BASELINE]),
              default=VARIANT_FOCUS)
@click.option("--workspace", "workspace_path", type=str, default=None,
              help="Workspace root (defaults to $FOCUS_WORKSPACE).")
def cmd_run(image_path, box_text, config_path, prompt_file, mode, variant, workspace_path):
    """Run the pipeline once on IMAGE_PATH and store the result."""
    workspace = WorkspaceLayout.from_env(workspace_path).ensure()
    try:
        prompt = load_prompt_file(prompt_file) if prompt_file else None
        config, _ = load_config(
            config_path, default_fixtures_dir=workspace.fixtures_dir,
            mode=mode, prompt=prompt,
        )
        image = imageio.load_image(image_path)
        box = _parse_box(box_text)
        box.require_within(image.width, image.height)
        backends = build_backends(config.backends)
    except (ConfigError, BoxOutOfBoundsError, FocusError) as exc:
        _fail(EXIT_INPUT, str(exc))
    except (OSError, ValueError) as exc:
        _fail(EXIT_INPUT, f"cannot load image {image_path}: {exc}")

    image_id = Path(image_path).stem
    try:
        if variant == VARIANT_FOCUS:
            result = run_pipeline(image, box, config, backends, image_id=image_id)
        else:
            result = run_baseline_auto(image, box, config, backends, image_id=image_id)
    except PipelineStageError as exc:
        _fail(STAGE_EXIT.get(exc.stage, EXIT_INPUT), str(exc))

    run_id = new_run_id()
    attended_path = workspace.attended_path(run_id)
    imageio.save_png(result.attended.image, attended_path)
    doc = result.to_dict(attended_png=attended_path.name)
    result_path = workspace.result_path(run_id)
    result_path.write_text(json.dumps(doc, indent=2, sort_keys=True), "utf-8")
    click.echo(json.dumps(doc, indent=2, sort_keys=True))
    click.echo(f"run {run_id}: result at {result_path}", err=True)


def _write_reports(out_dir: Path, cases, results_by_method, options: EvalOptions,
                   include_discrepancy: bool):
    out_dir.mkdir(parents=True, exist_ok=True)
    table = sweep(cases, results_by_method, options.cutoffs, options.aggregate)
    (out_dir / "sweep.csv").write_text(table.to_csv(), "utf-8")
    (out_dir / "sweep.json").write_text(
        json.dumps(table.to_json_obj(), indent=2, sort_keys=True) + "\n", "utf-8"
    )
    with open(out_dir / "matches.jsonl", "w", encoding="utf-8") as fh:
        for record in per_image_records(cases, results_by_method, options.cutoffs):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    (out_dir / "difficulty.json").write_text(
        json.dumps(difficulty_summary(cases, results_by_method, options.cutoffs),
                   indent=2, sort_keys=True) + "\n",
        "utf-8",
    )
    save_cases(cases, out_dir / "cases.jsonl")
    if include_discrepancy:
        report = discrepancy_report(
            results_by_method[VARIANT_BASELINE],
            results_by_method[VARIANT_FOCUS],
            min_count=options.discrepancy_min_count,
            top_k=options.discrepancy_top_k,
        )
        doc = {
            "schema": "focus.discrepancy_report/1",
            "min_count": options.discrepancy_min_count,
            "top_k": options.discrepancy_top_k,
            "labels": [
                {"label": d.label, "discrepancy": d.discrepancy, "cases": d.cases}
                for d in report
            ],
        }
        (out_dir / "discrepancy.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8"
        )
    return table


@main.command("eval")
@click.option("--dataset", type=click.Choice(["coco", "voc"]), required=True)
@click.option("--annotations", "annotation_path", type=str, required=True,
              help="COCO instances JSON file or VOC XML directory.")
@click.option("--targets", type=str, required=True,
              help="Comma-separated target category names, e.g. person or car.")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--variant", type=click.Choice([VARIANT_FOCUS, VARIANT_BASELINE, "both"]),
              default="both")
@click.option("--image-root", type=str, default=None,
              help="Directory image file names resolve against.")
@click.option("--out-dir", type=str, default=None,
              help="Report directory (defaults to <workspace>/reports).")
@click.option("--parallelism", type=int, default=None)
@click.option("--disc-min-count", type=int, default=None,
              help="Minimum proposal appearances for the discrepancy report.")
@click.option("--disc-top-k", type=int, default=None)
@click.option("--workspace", "workspace_path", type=str, default=None)
def cmd_eval(dataset, annotation_path, targets, config_path, variant, image_root,
             out_dir, parallelism, disc_min_count, disc_top_k, workspace_path):
    """Ingest annotations, batch-run the selected variants, write reports."""
    workspace = WorkspaceLayout.from_env(workspace_path).ensure()
    try:
        config, options = load_config(
            config_path, default_fixtures_dir=workspace.fixtures_dir,
            parallelism=parallelism,
        )
    except ConfigError as exc:
        _fail(EXIT_INPUT, str(exc))
    if disc_min_count is not None or disc_top_k is not None:
        from dataclasses import replace
        options = replace(
            options,
            discrepancy_min_count=(
                disc_min_count if disc_min_count is not None else options.discrepancy_min_count
            ),
            discrepancy_top_k=(
                disc_top_k if disc_top_k is not None else options.discrepancy_top_k
            ),
        )

    target_set = {t.strip() for t in targets.split(",") if t.strip()}
    if not target_set:
        _fail(EXIT_INPUT, "no target categories given")
    try:
        if dataset == "coco":
            cases = ingest_coco(annotation_path, target_set, image_root=image_root)
        else:
            cases = ingest_voc(annotation_path, target_set, image_root=image_root)
    except (AnnotationParseError, AnnotationSchemaError) as exc:
        _fail(EXIT_ANNOTATION, str(exc))
    if not cases:
        _fail(EXIT_INPUT, "no cases matched the target categories")

    try:
        backends = build_backends(config.backends)
    except (ConfigError, FocusError) as exc:
        _fail(EXIT_INPUT, str(exc))

    results_by_method: dict[str, list] = {}
    if variant in (VARIANT_FOCUS, "both"):
        results_by_method[VARIANT_FOCUS] = batch_run(
            cases, config, VARIANT_FOCUS, backends
        )
    if variant in (VARIANT_BASELINE, "both"):
        reuse = None
        if variant == "both":
            reuse = [
                r.proposal if isinstance(r, PipelineResult) else None
                for r in results_by_method[VARIANT_FOCUS]
            ]
        results_by_method[VARIANT_BASELINE] = batch_run(
            cases, config, VARIANT_BASELINE, backends, reuse_proposals=reuse
        )
    # Row order mirrors the usual table layout: baseline rows above pipeline rows.
    if variant == "both":
        results_by_method = {
            VARIANT_BASELINE: results_by_method[VARIANT_BASELINE],
            VARIANT_FOCUS: results_by_method[VARIANT_FOCUS],
        }

    errors = [r for rs in results_by_method.values() for r in rs if isinstance(r, RunError)]
    successes = sum(
        1 for rs in results_by_method.values() for r in rs if isinstance(r, PipelineResult)
    )
    if successes == 0:
        stage = Counter(e.stage for e in errors).most_common(1)[0][0]
        for err in errors[:5]:
            click.echo(f"error [{err.stage}] {err.image_id}: {err.message}", err=True)
        _fail(STAGE_EXIT.get(stage, EXIT_INPUT), "every case failed; no reports written")

    reports_dir = Path(out_dir) if out_dir else workspace.reports_dir
    table = _write_reports(reports_dir, cases, results_by_method, options,
                           include_discrepancy=(variant == "both"))
    click.echo(table.to_csv(), nl=False)
    if errors:
        click.echo(f"{len(errors)} case failure(s) recorded in reports", err=True)
    click.echo(f"reports written to {reports_dir}", err=True)


@main.command("serve")
@click.option("--port", type=int, default=8321)
@click.option("--host", type=str, default="127.0.0.1")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--workspace", "workspace_path", type=str, default=None)
@click.option("--ui-dir", type=str, default=None,
              help="Static UI bundle to serve under /ui.")
def cmd_serve(port, host, config_path, workspace_path, ui_dir):
    """Serve the HTTP API (and optionally the UI bundle)."""
    import uvicorn

    from .service import create_app

    workspace = WorkspaceLayout.from_env(workspace_path).ensure()
    try:
        config, _ = load_config(config_path, default_fixtures_dir=workspace.fixtures_dir)
        app = create_app(workspace, config, ui_dir=ui_dir)
    except (ConfigError, FocusError) as exc:
        _fail(EXIT_INPUT, str(exc))

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        probe.bind((host, port))
    except OSError as exc:
        _fail(EXIT_BIND, f"cannot bind {host}:{port}: {exc}")
    finally:
        probe.close()

    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command("mock-fixtures")
@click.option("--seed", type=int, default=42)
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--images", "n_images", type=int, default=12)
def cmd_mock_fixtures(seed, out_dir, n_images):
    """Generate the deterministic synthetic corpus (images, fixtures, annotations)."""
    from .fixtures import generate_corpus

    try:
        info = generate_corpus(seed, out_dir, n_images=n_images)
    except OSError as exc:
        _fail(EXIT_INPUT, f"cannot write corpus to {out_dir}: {exc}")
    click.echo(
        f"corpus at {info.out_dir}: {info.n_images} images / {info.n_cases} cases, "
        f"{info.n_voc_images} vehicle images / {info.n_voc_cases} cases"
    )


if __name__ == "__main__":
    main()
