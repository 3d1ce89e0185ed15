"""HTTP service exposing pipeline runs to scripts and the guidance UI.

Runs are asynchronous: POST /api/runs answers 202 with a run id and clients
poll GET /api/runs/{id} until the manifest reports done or failed. All
artifacts land in the workspace.
"""

from __future__ import annotations

from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import replace
from pathlib import Path
from typing import Literal

from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import imageio
from .backends import BackendSet, build_backends
from .config import config_snapshot
from .errors import (
    ConfigError,
    EmptyPromptError,
    EmptyProposalError,
    FocusError,
    PipelineStageError,
)
from .geometry import AttendedImage, BBox, BoxOutOfBoundsError, IsolationMode, RasterImage
from .pipeline import (
    PipelineConfig,
    PipelineResult,
    STAGE_DETECT,
    STAGE_INPUT,
    VARIANT_BASELINE,
    VARIANT_FOCUS,
    run_baseline,
    run_baseline_auto,
    run_pipeline,
)
from .proposals import ProposalList, RawProposal, TaskPrompt
from .workspace import (
    RunManifest,
    RunStore,
    STATUS_DONE,
    STATUS_FAILED,
    STATUS_PENDING,
    STATUS_RUNNING,
    WorkspaceLayout,
    new_run_id,
    utc_now,
)


class PromptBody(BaseModel):
    task: str
    addendum: str = ""


class RunRequest(BaseModel):
    image_id: str | None = None
    image_png_b64: str | None = None
    box: list[int] = Field(min_length=4, max_length=4)
    prompt: PromptBody | None = None
    mode: str | None = None
    variant: Literal["focus", "baseline"] = "focus"


class RunCreated(BaseModel):
    run_id: str


class RunStatusBody(BaseModel):
    run_id: str
    status: str
    created_at: str
    variant: str
    image_id: str
    box: list[int]
    mode: str
    parent_run_id: str | None = None
    error: dict | None = None
    result: dict | None = None


class ImageInfo(BaseModel):
    image_id: str
    width: int
    height: int


class ImageUpload(BaseModel):
    image_png_b64: str
    name: str | None = None


class RerunRequest(BaseModel):
    proposal_override: list[str] = Field(min_length=1)


def _field_error(loc: list, msg: str) -> HTTPException:
    return HTTPException(
        status_code=422,
        detail=[{"loc": ["body", *loc], "msg": msg, "type": "value_error"}],
    )


class _Runner:
    """Owns the executor and moves manifests through their lifecycle."""

    def __init__(self, workspace: WorkspaceLayout, config: PipelineConfig,
                 backends: BackendSet):
        self.workspace = workspace
        self.config = config
        self.backends = backends
        self.store = RunStore(workspace)
        self.executor = ThreadPoolExecutor(max_workers=config.parallelism)
        self.futures: dict[str, Future] = {}

    def submit(self, manifest: RunManifest, job) -> None:
        self.store.create(manifest)
        future = self.executor.submit(self._wrap, manifest.run_id, job)
        self.futures[manifest.run_id] = future

    def _wrap(self, run_id: str, job) -> None:
        self.store.update(run_id, status=STATUS_RUNNING)
        try:
            result = job()
        except PipelineStageError as exc:
            cause = exc.__cause__
            self.store.update(run_id, status=STATUS_FAILED, error={
                "stage": exc.stage,
                "type": type(cause).__name__ if cause else "PipelineStageError",
                "message": str(cause) if cause else str(exc),
            })
            return
        except Exception as exc:
            self.store.update(run_id, status=STATUS_FAILED, error={
                "stage": "unknown", "type": type(exc).__name__, "message": str(exc),
            })
            return
        attended_path = self.workspace.attended_path(run_id)
        imageio.save_png(result.attended.image, attended_path)
        result_path = self.workspace.result_path(run_id)
        doc = result.to_dict(attended_png=attended_path.name)
        result_path.write_text(_json_dumps(doc), "utf-8")
        self.store.update(
            run_id, status=STATUS_DONE,
            result_path=str(result_path.relative_to(self.workspace.root)),
        )

    def shutdown(self) -> None:
        for run_id, future in list(self.futures.items()):
            if future.cancel():
                manifest = self.store.get(run_id)
                if manifest is not None and manifest.status == STATUS_PENDING:
                    self.store.update(run_id, status=STATUS_FAILED, error={
                        "stage": "unknown", "type": "Cancelled",
                        "message": "service shut down before the run started",
                    })
        self.executor.shutdown(wait=True)


def _json_dumps(doc: dict) -> str:
    import json

    return json.dumps(doc, indent=2, sort_keys=True)


def create_app(
    workspace: WorkspaceLayout,
    config: PipelineConfig,
    backends: BackendSet | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    workspace.ensure()
    if backends is None:
        backends = build_backends(config.backends)
    runner = _Runner(workspace, config, backends)

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        yield
        runner.shutdown()

    app = FastAPI(title="focus", version="0.1.0", lifespan=lifespan)
    app.state.runner = runner

    def resolve_image(body: RunRequest) -> tuple[str, RasterImage]:
        if (body.image_id is None) == (body.image_png_b64 is None):
            raise _field_error(["image_id"], "provide exactly one of image_id or image_png_b64")
        if body.image_id is not None:
            path = workspace.image_path(body.image_id)
            if not path.exists():
                raise _field_error(["image_id"], f"unknown image {body.image_id!r}")
            return body.image_id, imageio.load_image(path)
        image = _decode_upload(body.image_png_b64, ["image_png_b64"])
        image_id = image.digest()
        path = workspace.image_path(image_id)
        if not path.exists():
            imageio.save_png(image, path)
        return image_id, image

    def _decode_upload(b64: str, loc: list) -> RasterImage:
        try:
            return imageio.image_from_b64(b64)
        except ValueError as exc:
            raise _field_error(loc, str(exc))

    def parse_box(raw: list[int], image: RasterImage) -> BBox:
        try:
            box = BBox(*raw)
            box.require_within(image.width, image.height)
        except BoxOutOfBoundsError as exc:
            raise _field_error(["box"], str(exc))
        return box

    def run_config_for(body: RunRequest) -> PipelineConfig:
        cfg = config
        if body.mode is not None:
            try:
                cfg = replace(cfg, mode=IsolationMode.parse(body.mode))
            except (ValueError, ConfigError) as exc:
                raise _field_error(["mode"], str(exc))
        if body.prompt is not None:
            try:
                cfg = replace(cfg, prompt=TaskPrompt(body.prompt.task, body.prompt.addendum))
            except EmptyPromptError as exc:
                raise _field_error(["prompt", "task"], str(exc))
        return cfg

    def manifest_body(manifest: RunManifest) -> RunStatusBody:
        result_doc = None
        if manifest.status == STATUS_DONE and manifest.result_path:
            path = workspace.root / manifest.result_path
            if path.exists():
                import json

                result_doc = json.loads(path.read_text("utf-8"))
        return RunStatusBody(
            run_id=manifest.run_id,
            status=manifest.status,
            created_at=manifest.created_at,
            variant=manifest.variant,
            image_id=manifest.image_id,
            box=list(manifest.box),
            mode=manifest.mode,
            parent_run_id=manifest.parent_run_id,
            error=manifest.error,
            result=result_doc,
        )

    @app.get("/")
    def root():
        return {"service": "focus", "api": "/api", "ui": "/ui" if ui_dir else None}

    @app.post("/api/runs", response_model=RunCreated, status_code=202)
    def create_run(body: RunRequest):
        image_id, image = resolve_image(body)
        box = parse_box(body.box, image)
        cfg = run_config_for(body)
        run_id = new_run_id()
        manifest = RunManifest(
            run_id=run_id,
            status=STATUS_PENDING,
            created_at=utc_now(),
            variant=body.variant,
            image_id=image_id,
            box=box.as_tuple(),
            mode=cfg.mode.value,
            config_snapshot=config_snapshot(cfg),
        )

        def job() -> PipelineResult:
            if body.variant == VARIANT_FOCUS:
                return run_pipeline(image, box, cfg, runner.backends, image_id=image_id)
            return run_baseline_auto(image, box, cfg, runner.backends, image_id=image_id)

        runner.submit(manifest, job)
        return RunCreated(run_id=run_id)

    @app.get("/api/runs")
    def list_runs():
        return {"run_ids": runner.store.list_ids()}

    @app.get("/api/runs/{run_id}", response_model=RunStatusBody)
    def get_run(run_id: str):
        manifest = runner.store.get(run_id)
        if manifest is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return manifest_body(manifest)

    @app.get("/api/runs/{run_id}/attended.png")
    def get_attended(run_id: str):
        manifest = runner.store.get(run_id)
        path = workspace.attended_path(run_id)
        if manifest is None or not path.exists():
            raise HTTPException(status_code=404, detail=f"no attended image for run {run_id!r}")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.post("/api/runs/{run_id}/rerun", response_model=RunCreated, status_code=202)
    def rerun(run_id: str, body: RerunRequest):
        parent = runner.store.get(run_id)
        if parent is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        if parent.status != STATUS_DONE:
            raise HTTPException(status_code=409, detail=f"run {run_id!r} is not done")
        try:
            labels = ProposalList.normalized(body.proposal_override)
        except EmptyProposalError:
            raise _field_error(["proposal_override"], "no labels survive normalization")
        image_path = workspace.image_path(parent.image_id)
        if not image_path.exists():
            raise HTTPException(status_code=409, detail="source image no longer in workspace")
        image = imageio.load_image(image_path)
        box = BBox(*parent.box)
        snapshot = parent.config_snapshot
        fill = tuple(int(c) for c in snapshot.get("fill", [0, 0, 0]))
        new_id = new_run_id()
        manifest = RunManifest(
            run_id=new_id,
            status=STATUS_PENDING,
            created_at=utc_now(),
            variant=parent.variant,
            image_id=parent.image_id,
            box=parent.box,
            mode=parent.mode,
            config_snapshot=snapshot,
            parent_run_id=run_id,
        )

        attended_png = workspace.attended_path(run_id)

        def job() -> PipelineResult:
            if parent.variant == VARIANT_BASELINE:
                return run_baseline(image, box, labels, config, runner.backends,
                                    image_id=parent.image_id)
            if not attended_png.exists():
                raise PipelineStageError(STAGE_INPUT, "parent attended image is missing")
            attended = AttendedImage(
                image=imageio.load_image(attended_png),
                mode=IsolationMode.parse(parent.mode),
                source_box=box,
                fill=fill,  # type: ignore[arg-type]
            )
            try:
                detections, dropped = runner.backends.require_detector().detect_counted(
                    attended.image, labels, config.base_tau
                )
            except FocusError as exc:
                err = PipelineStageError(STAGE_DETECT, f"{type(exc).__name__}: {exc}")
                err.__cause__ = exc
                raise err from exc
            return PipelineResult(
                image_id=parent.image_id,
                variant=VARIANT_FOCUS,
                input_box=box,
                attended=attended,
                prompt_text="",
                raw_proposal=RawProposal(text=labels.joined(), source="override"),
                proposal=labels,
                detections=tuple(detections),
                base_tau=config.base_tau,
                stage_timings={},
                diagnostics={"dropped_detections": dropped, "retries": {}},
            )

        runner.submit(manifest, job)
        return RunCreated(run_id=new_id)

    @app.delete("/api/runs/{run_id}", status_code=204)
    def delete_run(run_id: str):
        if not runner.store.delete(run_id):
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return Response(status_code=204)

    @app.get("/api/images")
    def list_images():
        images = []
        for path in sorted(workspace.images_dir.glob("*.png")):
            try:
                image = imageio.load_image(path)
            except Exception:
                continue
            images.append(ImageInfo(image_id=path.stem, width=image.width, height=image.height))
        return {"images": [im.model_dump() for im in images]}

    @app.post("/api/images", response_model=ImageInfo, status_code=201)
    def upload_image(body: ImageUpload):
        image = _decode_upload(body.image_png_b64, ["image_png_b64"])
        image_id = image.digest()
        path = workspace.image_path(image_id)
        if not path.exists():
            imageio.save_png(image, path)
        return ImageInfo(image_id=image_id, width=image.width, height=image.height)

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
