"""Declarative run configuration: one JSON document covering the pipeline
settings and backend endpoints. Precedence is flags over file over defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backends import BackendEndpointConfig, BackendRole
from .errors import ConfigError
from .evaluation import DEFAULT_CUTOFFS
from .geometry import ContainmentKind, ContainmentPolicy, IsolationMode
from .pipeline import PipelineConfig
from .proposals import TaskPrompt, default_prompt


@dataclass(frozen=True)
class EvalOptions:
    cutoffs: tuple[float, ...] = DEFAULT_CUTOFFS
    aggregate: str = "macro"
    discrepancy_min_count: int = 100
    discrepancy_top_k: int = 10


def _parse_containment(doc) -> ContainmentPolicy:
    if doc is None:
        return ContainmentPolicy.center_in()
    if not isinstance(doc, dict) or "policy" not in doc:
        raise ConfigError(f"containment must be an object with a policy, got {doc!r}")
    try:
        kind = ContainmentKind(doc["policy"])
    except ValueError:
        raise ConfigError(f"unknown containment policy {doc['policy']!r}") from None
    if kind is ContainmentKind.IOA_AT_LEAST:
        if "theta" not in doc:
            raise ConfigError("ioa_at_least containment requires theta")
        return ContainmentPolicy.ioa_at_least(float(doc["theta"]))
    return ContainmentPolicy(kind)


def _parse_backend(role: BackendRole, doc, base_dir: Path) -> BackendEndpointConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"backend {role.value} must be an object, got {doc!r}")
    kind = doc.get("kind")
    target = doc.get("target")
    if kind == "mock" and target is not None:
        target_path = Path(target)
        if not target_path.is_absolute():
            target = str((base_dir / target_path).resolve())
    try:
        return BackendEndpointConfig(
            role=role,
            kind=kind,
            target=target,
            timeout=float(doc.get("timeout", 30.0)),
            retries=int(doc.get("retries", 2)),
            token=doc.get("token"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad backend config for {role.value}: {exc}") from exc


def _parse_prompt(doc) -> TaskPrompt:
    if not isinstance(doc, dict) or "task" not in doc:
        raise ConfigError(f"prompt must be an object with a task, got {doc!r}")
    return TaskPrompt(task_text=str(doc["task"]), addendum=str(doc.get("addendum", "")))


def load_prompt_file(path: str | Path) -> TaskPrompt:
    """Prompt override file: JSON with "task" and optional "addendum"."""
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read prompt file {path}: {exc}") from exc
    return _parse_prompt(doc)


def default_backend_configs(fixtures_dir: str | Path) -> dict[BackendRole, BackendEndpointConfig]:
    """Offline defaults: rectangle-mask segmenter, fixture proposer/detector."""
    fixtures = str(fixtures_dir)
    return {
        BackendRole.SEGMENTER: BackendEndpointConfig(role=BackendRole.SEGMENTER, kind="mock"),
        BackendRole.PROPOSER: BackendEndpointConfig(
            role=BackendRole.PROPOSER, kind="mock", target=fixtures
        ),
        BackendRole.DETECTOR: BackendEndpointConfig(
            role=BackendRole.DETECTOR, kind="mock", target=fixtures
        ),
    }


def load_config(
    path: str | Path | None,
    default_fixtures_dir: str | Path = "fixtures",
    mode: str | None = None,
    prompt: TaskPrompt | None = None,
    parallelism: int | None = None,
) -> tuple[PipelineConfig, EvalOptions]:
    """Build the run configuration. Keyword arguments are flag-level overrides
    and win over file values; file values win over defaults."""
    doc: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config file {path} is not valid JSON "
                f"(line {exc.lineno} column {exc.colno}: {exc.msg})"
            ) from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        base_dir = path.parent.resolve()

    if "backends" in doc:
        if not isinstance(doc["backends"], dict):
            raise ConfigError("backends must be an object keyed by role")
        backends = {}
        for role_name, backend_doc in doc["backends"].items():
            try:
                role = BackendRole(role_name)
            except ValueError:
                raise ConfigError(f"unknown backend role {role_name!r}") from None
            backends[role] = _parse_backend(role, backend_doc, base_dir)
    else:
        backends = default_backend_configs(default_fixtures_dir)

    try:
        resolved_mode = IsolationMode.parse(mode if mode is not None else doc.get("mode", "segment_mask"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    fill_doc = doc.get("fill", [0, 0, 0])
    if not (isinstance(fill_doc, (list, tuple)) and len(fill_doc) == 3):
        raise ConfigError(f"fill must be a 3-element RGB list, got {fill_doc!r}")
    fill = (int(fill_doc[0]), int(fill_doc[1]), int(fill_doc[2]))

    if prompt is None:
        prompt = _parse_prompt(doc["prompt"]) if "prompt" in doc else default_prompt()

    try:
        pipeline_config = PipelineConfig(
            prompt=prompt,
            backends=backends,
            mode=resolved_mode,
            fill=fill,
            base_tau=float(doc.get("base_tau", 0.1)),
            containment=_parse_containment(doc.get("containment")),
            parallelism=int(parallelism if parallelism is not None else doc.get("parallelism", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pipeline configuration: {exc}") from exc

    cutoffs_doc = doc.get("cutoffs", list(DEFAULT_CUTOFFS))
    if not (isinstance(cutoffs_doc, list) and cutoffs_doc
            and all(isinstance(c, (int, float)) for c in cutoffs_doc)):
        raise ConfigError(f"cutoffs must be a non-empty list of numbers, got {cutoffs_doc!r}")
    eval_options = EvalOptions(
        cutoffs=tuple(float(c) for c in cutoffs_doc),
        aggregate=str(doc.get("aggregate", "macro")),
        discrepancy_min_count=int(doc.get("discrepancy_min_count", 100)),
        discrepancy_top_k=int(doc.get("discrepancy_top_k", 10)),
    )
    if eval_options.aggregate not in ("macro", "micro"):
        raise ConfigError(f"aggregate must be macro or micro, got {eval_options.aggregate!r}")
    return pipeline_config, eval_options


def config_snapshot(config: PipelineConfig) -> dict:
    """JSON-safe snapshot of a pipeline config, for manifests and provenance."""
    containment: dict = {"policy": config.containment.kind.value}
    if config.containment.theta is not None:
        containment["theta"] = config.containment.theta
    return {
        "mode": config.mode.value,
        "fill": list(config.fill),
        "base_tau": config.base_tau,
        "containment": containment,
        "parallelism": config.parallelism,
        "prompt": {"task": config.prompt.task_text, "addendum": config.prompt.addendum},
        "backends": {
            role.value: {
                "kind": c.kind,
                "target": c.target,
                "timeout": c.timeout,
                "retries": c.retries,
            }
            for role, c in config.backends.items()
        },
    }
