"""Region-isolated open-vocabulary detection pipeline.

The pipeline runs in three stages: isolate the user's region of interest
(optionally with a segmentation mask), ask a vision-language model to propose
the objects present, then run an open-vocabulary detector over the isolated
image with the proposed labels as its vocabulary. Model backends plug in
behind a small HTTP protocol; deterministic mocks cover offline use.
"""

__version__ = "0.1.0"

from .backends import (
    BackendEndpointConfig,
    BackendRole,
    BackendSet,
    Detection,
    build_backends,
)
from .errors import FocusError
from .geometry import (
    AttendedImage,
    BBox,
    BinaryMask,
    ContainmentPolicy,
    IsolationMode,
    RasterImage,
    apply_mask,
    contains,
    crop,
    ioa,
    isolate_region,
)
from .evaluation import (
    DifficultyGroup,
    EvalCase,
    MatchReport,
    SweepTable,
    difficulty_of,
    filter_by_cutoff,
    ingest_coco,
    ingest_voc,
    match_lists,
    sweep,
)
from .pipeline import (
    PipelineConfig,
    PipelineResult,
    RunError,
    batch_run,
    run_baseline,
    run_pipeline,
)
from .proposals import (
    ProposalList,
    RawProposal,
    TaskPrompt,
    build_prompt,
    normalize_label,
    parse_proposal,
)

__all__ = [
    "AttendedImage",
    "BBox",
    "BackendEndpointConfig",
    "BackendRole",
    "BackendSet",
    "BinaryMask",
    "ContainmentPolicy",
    "Detection",
    "DifficultyGroup",
    "EvalCase",
    "FocusError",
    "IsolationMode",
    "MatchReport",
    "PipelineConfig",
    "PipelineResult",
    "ProposalList",
    "RasterImage",
    "RawProposal",
    "RunError",
    "SweepTable",
    "TaskPrompt",
    "apply_mask",
    "batch_run",
    "build_backends",
    "build_prompt",
    "contains",
    "crop",
    "difficulty_of",
    "filter_by_cutoff",
    "ingest_coco",
    "ingest_voc",
    "ioa",
    "isolate_region",
    "match_lists",
    "normalize_label",
    "parse_proposal",
    "run_baseline",
    "run_pipeline",
    "sweep",
]
