"""Composes region isolation, proposal extraction, and detection into runs.

Two run flavors exist: the full pipeline (isolate, propose, detect on the
attended image) and the baseline (detect on the untouched image with the
supplied labels, then keep only detections contained in the query box).
Batches fan out over a thread pool; per-case failures become error records
and never abort the batch.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import imageio
from .backends import (
    BackendEndpointConfig,
    BackendRole,
    BackendSet,
    Detection,
    build_backends,
    record_retries,
)
from .errors import ConfigError, FocusError, PipelineStageError
from .geometry import (
    RGB,
    AttendedImage,
    BBox,
    BinaryMask,
    ContainmentPolicy,
    DEFAULT_CONTAINMENT,
    IsolationMode,
    RasterImage,
    contains,
    isolate_region,
)
from .proposals import ProposalList, RawProposal, TaskPrompt, build_prompt, parse_proposal

RESULT_SCHEMA = "focus.pipeline_result/1"
ERROR_SCHEMA = "focus.run_error/1"

STAGE_INPUT = "input"
STAGE_SEGMENT = "segment"
STAGE_PROPOSE = "propose"
STAGE_DETECT = "detect"

VARIANT_FOCUS = "focus"
VARIANT_BASELINE = "baseline"

DEFAULT_BASE_TAU = 0.1


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs besides the image and box."""

    prompt: TaskPrompt
    backends: dict[BackendRole, BackendEndpointConfig]
    mode: IsolationMode = IsolationMode.SEGMENT_MASK
    fill: RGB = (0, 0, 0)
    base_tau: float = DEFAULT_BASE_TAU
    containment: ContainmentPolicy = DEFAULT_CONTAINMENT
    parallelism: int = 1

    def __post_init__(self):
        if not (0.0 <= self.base_tau <= 1.0):
            raise ConfigError(f"base_tau must be in [0, 1], got {self.base_tau}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.mode is IsolationMode.SEGMENT_MASK and BackendRole.SEGMENTER not in self.backends:
            raise ConfigError("segment_mask mode requires a segmenter backend")


@dataclass(frozen=True)
class PipelineResult:
    """Staged provenance of one run. Detection boxes are in attended-image
    coordinates; ``attended.origin`` carries the offset back to the original."""

    image_id: str
    variant: str
    input_box: BBox
    attended: AttendedImage
    prompt_text: str
    raw_proposal: RawProposal
    proposal: ProposalList
    detections: tuple[Detection, ...]
    base_tau: float
    stage_timings: dict[str, float] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        # Closure invariants, asserted on every run regardless of backend.
        for det in self.detections:
            if det.label not in self.proposal:
                raise ValueError(f"detection label {det.label!r} not in proposal")
            if det.score < self.base_tau:
                raise ValueError(f"detection score {det.score} below base tau {self.base_tau}")
            det.box.require_within(self.attended.image.width, self.attended.image.height)

    def detections_original(self) -> tuple[Detection, ...]:
        """Detections with boxes mapped back to original-image coordinates."""
        return tuple(
            Detection(d.label, d.score, self.attended.to_original(d.box))
            for d in self.detections
        )

    def detected_labels(self) -> list[str]:
        return [d.label for d in self.detections]

    def to_dict(self, include_timings: bool = True, attended_png: str | None = None) -> dict:
        doc = {
            "schema": RESULT_SCHEMA,
            "image_id": self.image_id,
            "variant": self.variant,
            "input_box": list(self.input_box.as_tuple()),
            "mode": self.attended.mode.value,
            "fill": list(self.attended.fill),
            "attended_origin": list(self.attended.origin),
            "attended_size": [self.attended.image.width, self.attended.image.height],
            "base_tau": self.base_tau,
            "prompt_text": self.prompt_text,
            "raw_proposal": {"text": self.raw_proposal.text, "source": self.raw_proposal.source},
            "proposal": list(self.proposal),
            "detections": [
                {
                    "label": d.label,
                    "score": d.score,
                    "box_attended": list(d.box.as_tuple()),
                    "box_original": list(self.attended.to_original(d.box).as_tuple()),
                }
                for d in self.detections
            ],
            "diagnostics": self.diagnostics,
        }
        if include_timings:
            doc["stage_timings"] = self.stage_timings
        if attended_png is not None:
            doc["attended_png"] = attended_png
        return doc


@dataclass(frozen=True)
class RunError:
    """A captured per-case failure inside a batch."""

    image_id: str
    stage: str
    error_type: str
    message: str

    def to_dict(self) -> dict:
        return {
            "schema": ERROR_SCHEMA,
            "image_id": self.image_id,
            "stage": self.stage,
            "error_type": self.error_type,
            "message": self.message,
        }


def _stage(stage: str, exc: Exception) -> PipelineStageError:
    err = PipelineStageError(stage, f"{type(exc).__name__}: {exc}")
    err.__cause__ = exc
    return err


def _segment_and_isolate(
    image: RasterImage,
    box: BBox,
    config: PipelineConfig,
    backends: BackendSet,
    timings: dict[str, float],
) -> AttendedImage:
    mask: BinaryMask | None = None
    if config.mode is IsolationMode.SEGMENT_MASK:
        t0 = time.perf_counter()
        try:
            mask = backends.require_segmenter().segment(image, box)
        except Exception as exc:
            raise _stage(STAGE_SEGMENT, exc) from exc
        timings[STAGE_SEGMENT] = time.perf_counter() - t0
    try:
        return isolate_region(image, box, mask, config.mode, config.fill)
    except Exception as exc:
        raise _stage(STAGE_SEGMENT, exc) from exc


def _propose(
    attended: AttendedImage,
    config: PipelineConfig,
    backends: BackendSet,
    timings: dict[str, float],
) -> tuple[str, RawProposal, ProposalList]:
    prompt_text = build_prompt(config.prompt)
    t0 = time.perf_counter()
    try:
        raw = backends.require_proposer().propose(attended.image, prompt_text)
        proposal = parse_proposal(raw)
    except Exception as exc:
        raise _stage(STAGE_PROPOSE, exc) from exc
    timings[STAGE_PROPOSE] = time.perf_counter() - t0
    return prompt_text, raw, proposal


def _detect(
    image: RasterImage,
    proposal: ProposalList,
    config: PipelineConfig,
    backends: BackendSet,
    timings: dict[str, float],
) -> tuple[list[Detection], int]:
    t0 = time.perf_counter()
    try:
        detections, dropped = backends.require_detector().detect_counted(
            image, proposal, config.base_tau
        )
    except Exception as exc:
        raise _stage(STAGE_DETECT, exc) from exc
    timings[STAGE_DETECT] = time.perf_counter() - t0
    return detections, dropped


def run_pipeline(
    image: RasterImage,
    box: BBox,
    config: PipelineConfig,
    backends: BackendSet | None = None,
    image_id: str = "",
) -> PipelineResult:
    """Full run: isolate the region, extract proposals, detect on the attended image."""
    try:
        box.require_within(image.width, image.height)
    except Exception as exc:
        raise _stage(STAGE_INPUT, exc) from exc
    if backends is None:
        backends = build_backends(config.backends)
    timings: dict[str, float] = {}
    retries: dict[str, int] = {}
    with record_retries(retries):
        attended = _segment_and_isolate(image, box, config, backends, timings)
        prompt_text, raw, proposal = _propose(attended, config, backends, timings)
        detections, dropped = _detect(attended.image, proposal, config, backends, timings)
    return PipelineResult(
        image_id=image_id or image.digest(),
        variant=VARIANT_FOCUS,
        input_box=box,
        attended=attended,
        prompt_text=prompt_text,
        raw_proposal=raw,
        proposal=proposal,
        detections=tuple(detections),
        base_tau=config.base_tau,
        stage_timings=timings,
        diagnostics={"dropped_detections": dropped, "retries": retries},
    )


def run_baseline(
    image: RasterImage,
    box: BBox,
    labels: ProposalList,
    config: PipelineConfig,
    backends: BackendSet | None = None,
    image_id: str = "",
) -> PipelineResult:
    """Baseline run: detect over the untouched image with the given labels,
    then keep only detections contained in ``box`` per the configured policy."""
    try:
        box.require_within(image.width, image.height)
    except Exception as exc:
        raise _stage(STAGE_INPUT, exc) from exc
    if backends is None:
        backends = build_backends(config.backends)
    timings: dict[str, float] = {}
    retries: dict[str, int] = {}
    attended = isolate_region(image, box, None, IsolationMode.FULL, config.fill)
    with record_retries(retries):
        detections, dropped = _detect(attended.image, labels, config, backends, timings)
    kept = tuple(d for d in detections if contains(box, d.box, config.containment))
    return PipelineResult(
        image_id=image_id or image.digest(),
        variant=VARIANT_BASELINE,
        input_box=box,
        attended=attended,
        prompt_text="",
        raw_proposal=RawProposal(text=labels.joined(), source="reused"),
        proposal=labels,
        detections=kept,
        base_tau=config.base_tau,
        stage_timings=timings,
        diagnostics={
            "dropped_detections": dropped,
            "retries": retries,
            "containment_filtered": len(detections) - len(kept),
        },
    )


def run_baseline_auto(
    image: RasterImage,
    box: BBox,
    config: PipelineConfig,
    backends: BackendSet | None = None,
    image_id: str = "",
) -> PipelineResult:
    """Baseline run that first derives its label list the same way the full
    pipeline does (isolate, propose), so both variants share one vocabulary."""
    try:
        box.require_within(image.width, image.height)
    except Exception as exc:
        raise _stage(STAGE_INPUT, exc) from exc
    if backends is None:
        backends = build_backends(config.backends)
    timings: dict[str, float] = {}
    retries: dict[str, int] = {}
    with record_retries(retries):
        attended = _segment_and_isolate(image, box, config, backends, timings)
        _, _, proposal = _propose(attended, config, backends, timings)
    result = run_baseline(image, box, proposal, config, backends, image_id)
    merged_retries = dict(retries)
    for k, v in result.diagnostics.get("retries", {}).items():
        merged_retries[k] = merged_retries.get(k, 0) + v
    diagnostics = dict(result.diagnostics)
    diagnostics["retries"] = merged_retries
    timings.update(result.stage_timings)
    return PipelineResult(
        image_id=result.image_id,
        variant=result.variant,
        input_box=result.input_box,
        attended=result.attended,
        prompt_text=result.prompt_text,
        raw_proposal=result.raw_proposal,
        proposal=result.proposal,
        detections=result.detections,
        base_tau=result.base_tau,
        stage_timings=timings,
        diagnostics=diagnostics,
    )


def _run_case(case, config: PipelineConfig, variant: str, backends: BackendSet,
              reuse: ProposalList | None):
    case_id = getattr(case, "case_id", None) or getattr(case, "image_id", "")
    try:
        image = imageio.load_image(case.image_path)
    except Exception as exc:
        return RunError(case_id, STAGE_INPUT, type(exc).__name__, str(exc))
    try:
        if variant == VARIANT_FOCUS:
            return run_pipeline(image, case.input_box, config, backends, image_id=case_id)
        if reuse is not None:
            return run_baseline(image, case.input_box, reuse, config, backends, image_id=case_id)
        return run_baseline_auto(image, case.input_box, config, backends, image_id=case_id)
    except PipelineStageError as exc:
        cause = exc.__cause__
        return RunError(
            case_id,
            exc.stage,
            type(cause).__name__ if cause else type(exc).__name__,
            str(cause) if cause else str(exc),
        )
    except FocusError as exc:
        return RunError(case_id, STAGE_INPUT, type(exc).__name__, str(exc))


def batch_run(
    cases,
    config: PipelineConfig,
    variant: str = VARIANT_FOCUS,
    backends: BackendSet | None = None,
    reuse_proposals=None,
) -> list:
    """Run every case, at most ``config.parallelism`` in flight, results in
    case order. ``reuse_proposals`` (baseline only) supplies per-case label
    lists; entries may be None to fall back to deriving labels via the
    proposer. Failed cases yield RunError records in place of results."""
    if variant not in (VARIANT_FOCUS, VARIANT_BASELINE):
        raise ValueError(f"variant must be focus or baseline, got {variant!r}")
    if backends is None:
        backends = build_backends(config.backends)
    cases = list(cases)
    if reuse_proposals is not None and len(reuse_proposals) != len(cases):
        raise ValueError("reuse_proposals length must match cases")

    def job(i: int):
        reuse = reuse_proposals[i] if reuse_proposals is not None else None
        return _run_case(cases[i], config, variant, backends, reuse)

    if config.parallelism == 1 or len(cases) <= 1:
        return [job(i) for i in range(len(cases))]
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        return list(pool.map(job, range(len(cases))))


def serialize_results(items, include_timings: bool = False) -> str:
    """Canonical JSON for a sequence of results/errors.

    Stage timings are wall-clock noise and default to excluded here so that
    two runs over identical inputs compare byte-equal.
    """
    docs = []
    for item in items:
        if isinstance(item, PipelineResult):
            docs.append(item.to_dict(include_timings=include_timings))
        else:
            docs.append(item.to_dict())
    return json.dumps(docs, sort_keys=True, separators=(",", ":"))
