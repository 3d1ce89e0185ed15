"""Filesystem workspace: layout, run manifests, atomic status updates.

Every artifact write is confined to the workspace root. The root comes from
the FOCUS_WORKSPACE environment variable unless given explicitly.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

WORKSPACE_ENV = "FOCUS_WORKSPACE"
DEFAULT_WORKSPACE = "focus_workspace"

STATUS_PENDING = "pending"
STATUS_RUNNING = "running"
STATUS_DONE = "done"
STATUS_FAILED = "failed"

_TRANSITIONS = {
    STATUS_PENDING: {STATUS_RUNNING, STATUS_FAILED},
    STATUS_RUNNING: {STATUS_DONE, STATUS_FAILED},
    STATUS_DONE: set(),
    STATUS_FAILED: set(),
}


@dataclass(frozen=True)
class WorkspaceLayout:
    root: Path

    @classmethod
    def from_env(cls, override: str | Path | None = None) -> "WorkspaceLayout":
        root = Path(override or os.environ.get(WORKSPACE_ENV, DEFAULT_WORKSPACE))
        return cls(root=root)

    @property
    def images_dir(self) -> Path:
        return self.root / "images"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    @property
    def results_dir(self) -> Path:
        return self.root / "results"

    @property
    def attended_dir(self) -> Path:
        return self.root / "attended"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def fixtures_dir(self) -> Path:
        return self.root / "fixtures"

    def ensure(self) -> "WorkspaceLayout":
        for path in (
            self.root, self.images_dir, self.runs_dir, self.results_dir,
            self.attended_dir, self.reports_dir, self.fixtures_dir,
        ):
            path.mkdir(parents=True, exist_ok=True)
        return self

    def result_path(self, run_id: str) -> Path:
        return self.results_dir / f"{run_id}.json"

    def attended_path(self, run_id: str) -> Path:
        return self.attended_dir / f"{run_id}.png"

    def image_path(self, image_id: str) -> Path:
        return self.images_dir / f"{image_id}.png"

    def manifest_path(self, run_id: str) -> Path:
        return self.runs_dir / f"{run_id}.json"


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    status: str
    created_at: str
    variant: str
    image_id: str
    box: tuple[int, int, int, int]
    mode: str
    config_snapshot: dict = field(default_factory=dict)
    parent_run_id: str | None = None
    result_path: str | None = None
    error: dict | None = None

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "created_at": self.created_at,
            "variant": self.variant,
            "image_id": self.image_id,
            "box": list(self.box),
            "mode": self.mode,
            "config_snapshot": self.config_snapshot,
            "parent_run_id": self.parent_run_id,
            "result_path": self.result_path,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        return cls(
            run_id=doc["run_id"],
            status=doc["status"],
            created_at=doc["created_at"],
            variant=doc["variant"],
            image_id=doc["image_id"],
            box=tuple(doc["box"]),
            mode=doc["mode"],
            config_snapshot=doc.get("config_snapshot", {}),
            parent_run_id=doc.get("parent_run_id"),
            result_path=doc.get("result_path"),
            error=doc.get("error"),
        )


class RunStore:
    """Manifest persistence with atomic per-run status updates."""

    def __init__(self, workspace: WorkspaceLayout):
        self.workspace = workspace
        self._lock = threading.Lock()

    def _write(self, manifest: RunManifest) -> None:
        path = self.workspace.manifest_path(manifest.run_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True), "utf-8")
        os.replace(tmp, path)

    def create(self, manifest: RunManifest) -> None:
        with self._lock:
            if self.workspace.manifest_path(manifest.run_id).exists():
                raise ValueError(f"run {manifest.run_id} already exists")
            self._write(manifest)

    def get(self, run_id: str) -> RunManifest | None:
        path = self.workspace.manifest_path(run_id)
        if not path.exists():
            return None
        return RunManifest.from_dict(json.loads(path.read_text("utf-8")))

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.workspace.runs_dir.glob("*.json"))

    def update(self, run_id: str, **changes) -> RunManifest:
        with self._lock:
            manifest = self.get(run_id)
            if manifest is None:
                raise KeyError(f"unknown run {run_id}")
            if "status" in changes and changes["status"] != manifest.status:
                allowed = _TRANSITIONS[manifest.status]
                if changes["status"] not in allowed:
                    raise ValueError(
                        f"illegal status transition {manifest.status} -> {changes['status']}"
                    )
            updated = replace(manifest, **changes)
            self._write(updated)
            return updated

    def delete(self, run_id: str) -> bool:
        with self._lock:
            path = self.workspace.manifest_path(run_id)
            if not path.exists():
                return False
            path.unlink()
            for extra in (
                self.workspace.result_path(run_id),
                self.workspace.attended_path(run_id),
            ):
                if extra.exists():
                    extra.unlink()
            return True
