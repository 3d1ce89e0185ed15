"""Backend protocol roles (segmenter, proposer, detector), a wire-protocol
adapter for remote implementations, and deterministic fixture-driven mocks.

Adapters are stateless request executors and safe for concurrent calls. The
mock backends key their fixtures on content digests of the query, so identical
inputs plus identical fixtures always yield byte-identical outputs.
"""

from __future__ import annotations

import enum
import json
import math
import time
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import httpx

from . import imageio
from .errors import (
    BackendUnavailableError,
    BoxOutOfBoundsError,
    ConfigError,
    EmptyLabelError,
    FixtureMissError,
    ProtocolError,
)
from .geometry import BBox, BinaryMask, RasterImage
from .proposals import ProposalList, RawProposal, normalize_label, prompt_digest


@dataclass(frozen=True)
class Detection:
    """A scored, labeled box. Scores live in [0, 1]; labels are normalized."""

    label: str
    score: float
    box: BBox

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score out of range: {self.score}")

    def to_dict(self) -> dict:
        return {"label": self.label, "score": self.score, "box": list(self.box.as_tuple())}


class BackendRole(enum.Enum):
    SEGMENTER = "segmenter"
    PROPOSER = "proposer"
    DETECTOR = "detector"


@dataclass(frozen=True)
class BackendEndpointConfig:
    """Which implementation serves a protocol role.

    ``kind`` is "remote" (``target`` = base URL) or "mock" (``target`` =
    fixture directory; a mock segmenter with no target falls back to
    rectangle masks).
    """

    role: BackendRole
    kind: str
    target: str | None = None
    timeout: float = 30.0
    retries: int = 2
    token: str | None = None

    def __post_init__(self):
        if self.kind not in ("remote", "mock"):
            raise ConfigError(f"backend kind must be remote or mock, got {self.kind!r}")
        if self.kind == "remote" and not self.target:
            raise ConfigError(f"remote {self.role.value} backend requires a base URL")
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}")
        if self.retries < 0:
            raise ConfigError(f"retries must be >= 0, got {self.retries}")


@runtime_checkable
class SegmenterBackend(Protocol):
    def segment(self, image: RasterImage, box: BBox) -> BinaryMask: ...


@runtime_checkable
class ProposerBackend(Protocol):
    def propose(self, image: RasterImage, prompt: str) -> RawProposal: ...


@runtime_checkable
class DetectorBackend(Protocol):
    def detect(self, image: RasterImage, labels: ProposalList, tau: float) -> list[Detection]: ...

    def detect_counted(
        self, image: RasterImage, labels: ProposalList, tau: float
    ) -> tuple[list[Detection], int]: ...


# --- retry diagnostics -------------------------------------------------------

# Remote adapters report retries through a context-local sink so that the
# orchestrator can attribute them to a run without the adapters carrying state.
_RETRY_SINK: ContextVar[dict | None] = ContextVar("focus_retry_sink", default=None)


@contextmanager
def record_retries(counter: dict):
    token = _RETRY_SINK.set(counter)
    try:
        yield counter
    finally:
        _RETRY_SINK.reset(token)


def _note_retry(role: str) -> None:
    sink = _RETRY_SINK.get()
    if sink is not None:
        sink[role] = sink.get(role, 0) + 1


# --- detection contract enforcement -----------------------------------------

def round_half_away(v: float) -> int:
    """Round to the nearest integer with ties going away from zero."""
    return int(math.floor(v + 0.5)) if v >= 0 else int(math.ceil(v - 0.5))


def _coerce_box(raw, width: int, height: int) -> BBox | None:
    """Integer box from backend output, or None when out of contract."""
    try:
        coords = [round_half_away(float(v)) for v in raw]
    except (TypeError, ValueError):
        return None
    if len(coords) != 4:
        return None
    try:
        box = BBox(*coords)
        box.require_within(width, height)
    except BoxOutOfBoundsError:
        return None
    return box


def enforce_detection_contract(
    raw_detections,
    labels: ProposalList,
    tau: float,
    width: int,
    height: int,
) -> tuple[list[Detection], int]:
    """Filter raw backend detections down to the contract.

    A detection is dropped and COUNTED as a violation when its label is not in
    the request labels, its score falls outside [0, 1], or its box does not
    round to a valid box inside the image. A detection with a valid score
    below ``tau`` is filtered silently: that is ordinary thresholding, not a
    contract breach. Checks run in that order, so each dropped item counts once.
    """
    kept: list[Detection] = []
    dropped = 0
    for item in raw_detections:
        try:
            raw_label = item["label"]
            raw_score = float(item["score"])
            raw_box = item["box"]
        except (KeyError, TypeError, ValueError):
            dropped += 1
            continue
        try:
            label = normalize_label(str(raw_label))
        except EmptyLabelError:
            dropped += 1
            continue
        if label not in labels:
            dropped += 1
            continue
        if not (0.0 <= raw_score <= 1.0):
            dropped += 1
            continue
        box = _coerce_box(raw_box, width, height)
        if box is None:
            dropped += 1
            continue
        if raw_score < tau:
            continue
        kept.append(Detection(label=label, score=raw_score, box=box))
    return kept, dropped


class _ContractDetector:
    """Shared detect() plumbing: subclasses provide raw candidate dicts."""

    def _raw_detect(self, image: RasterImage, labels: ProposalList, tau: float) -> list:
        raise NotImplementedError

    def detect_counted(
        self, image: RasterImage, labels: ProposalList, tau: float
    ) -> tuple[list[Detection], int]:
        if not (0.0 <= tau <= 1.0):
            raise ValueError(f"tau must be in [0, 1], got {tau}")
        raw = self._raw_detect(image, labels, tau)
        return enforce_detection_contract(raw, labels, tau, image.width, image.height)

    def detect(self, image: RasterImage, labels: ProposalList, tau: float) -> list[Detection]:
        return self.detect_counted(image, labels, tau)[0]


# --- mock backends ------------------------------------------------------------

MASKS_DIRNAME = "masks"
PROPOSALS_FILENAME = "proposals.json"
DETECTIONS_FILENAME = "detections.json"


def mask_fixture_name(image_digest: str, box: BBox | None = None) -> str:
    if box is None:
        return f"{image_digest}.png"
    x1, y1, x2, y2 = box.as_tuple()
    return f"{image_digest}__{x1}_{y1}_{x2}_{y2}.png"


def proposal_fixture_key(image_digest: str, digest_of_prompt: str) -> str:
    return f"{image_digest}:{digest_of_prompt}"


class MockSegmenter:
    """Rectangle masks when no fixture directory is given, fixture masks otherwise.

    Fixture masks live at ``masks/<image digest>__<x1>_<y1>_<x2>_<y2>.png``;
    a box-less ``masks/<image digest>.png`` is probed as a fallback so an
    image with a single query region needs only one file.
    """

    def __init__(self, fixture_dir: str | Path | None = None):
        self.fixture_dir = Path(fixture_dir) if fixture_dir else None

    def segment(self, image: RasterImage, box: BBox) -> BinaryMask:
        box.require_within(image.width, image.height)
        if self.fixture_dir is None:
            return BinaryMask.from_box(image.width, image.height, box)
        digest = image.digest()
        masks = self.fixture_dir / MASKS_DIRNAME
        for name in (mask_fixture_name(digest, box), mask_fixture_name(digest)):
            path = masks / name
            if path.exists():
                mask = imageio.load_mask_png(path)
                if (mask.height, mask.width) != (image.height, image.width):
                    raise ProtocolError(
                        f"fixture mask {name} is {mask.width}x{mask.height}, "
                        f"image is {image.width}x{image.height}"
                    )
                return mask
        raise FixtureMissError(f"no mask fixture for image {digest} box {box.as_tuple()}")


class MockProposer:
    """Returns fixture text keyed by (image digest, prompt digest)."""

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)
        path = self.fixture_dir / PROPOSALS_FILENAME
        self._entries: dict[str, str] = json.loads(path.read_text("utf-8")) if path.exists() else {}

    def propose(self, image: RasterImage, prompt: str) -> RawProposal:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        key = proposal_fixture_key(image.digest(), prompt_digest(prompt))
        if key not in self._entries:
            raise FixtureMissError(f"no proposal fixture for key {key}")
        return RawProposal(text=self._entries[key], source="mock")


class MockDetector(_ContractDetector):
    """Returns fixture detections keyed by image digest, contract-enforced."""

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)
        path = self.fixture_dir / DETECTIONS_FILENAME
        self._entries: dict[str, list] = json.loads(path.read_text("utf-8")) if path.exists() else {}

    def _raw_detect(self, image: RasterImage, labels: ProposalList, tau: float) -> list:
        digest = image.digest()
        if digest not in self._entries:
            raise FixtureMissError(f"no detection fixture for image {digest}")
        return self._entries[digest]


# --- remote backends ----------------------------------------------------------

class _RemoteTransport:
    """POSTs JSON to one route with bounded retries on transport/server failure.

    A 200 with an undecodable or malformed body is a ProtocolError and is not
    retried; anything else (connect errors, timeouts, non-200) is retried up
    to ``retries`` extra attempts before raising BackendUnavailableError.
    """

    def __init__(
        self,
        config: BackendEndpointConfig,
        client: httpx.Client | None = None,
        backoff: float = 0.05,
    ):
        self.config = config
        self.backoff = backoff
        if client is not None:
            self._client = client
        else:
            headers = {}
            if config.token:
                headers["Authorization"] = f"Bearer {config.token}"
            self._client = httpx.Client(
                base_url=config.target, timeout=config.timeout, headers=headers
            )

    def post(self, route: str, payload: dict) -> dict:
        attempts = self.config.retries + 1
        last_failure = "no attempt made"
        for attempt in range(attempts):
            if attempt > 0:
                _note_retry(self.config.role.value)
                if self.backoff > 0:
                    time.sleep(min(self.backoff * (2 ** (attempt - 1)), 1.0))
            try:
                response = self._client.post(route, json=payload)
            except httpx.HTTPError as exc:
                last_failure = f"{type(exc).__name__}: {exc}"
                continue
            if response.status_code != 200:
                last_failure = f"HTTP {response.status_code}"
                continue
            try:
                body = response.json()
            except ValueError as exc:
                raise ProtocolError(f"{route}: response body is not JSON") from exc
            if not isinstance(body, dict):
                raise ProtocolError(f"{route}: expected a JSON object")
            return body
        raise BackendUnavailableError(
            f"{self.config.role.value} backend at {self.config.target} failed "
            f"after {attempts} attempts ({last_failure})"
        )


class RemoteSegmenter:
    def __init__(self, config: BackendEndpointConfig, client: httpx.Client | None = None,
                 backoff: float = 0.05):
        self._transport = _RemoteTransport(config, client, backoff)

    def segment(self, image: RasterImage, box: BBox) -> BinaryMask:
        box.require_within(image.width, image.height)
        body = self._transport.post(
            "/v1/segment",
            {"image_png_b64": imageio.png_b64(image), "box": list(box.as_tuple())},
        )
        if "mask_png_b64" not in body:
            raise ProtocolError("segment response missing mask_png_b64")
        try:
            mask = imageio.mask_from_b64(body["mask_png_b64"])
        except ValueError as exc:
            raise ProtocolError(f"segment response mask undecodable: {exc}") from exc
        if (mask.height, mask.width) != (image.height, image.width):
            raise ProtocolError(
                f"segment mask is {mask.width}x{mask.height}, "
                f"image is {image.width}x{image.height}"
            )
        return mask


class RemoteProposer:
    def __init__(self, config: BackendEndpointConfig, client: httpx.Client | None = None,
                 backoff: float = 0.05):
        self._transport = _RemoteTransport(config, client, backoff)
        self._source = f"remote:{config.target}"

    def propose(self, image: RasterImage, prompt: str) -> RawProposal:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        body = self._transport.post(
            "/v1/propose",
            {"image_png_b64": imageio.png_b64(image), "prompt": prompt},
        )
        if "text" not in body or not isinstance(body["text"], str):
            raise ProtocolError("propose response missing text")
        return RawProposal(text=body["text"], source=self._source)


class RemoteDetector(_ContractDetector):
    def __init__(self, config: BackendEndpointConfig, client: httpx.Client | None = None,
                 backoff: float = 0.05):
        self._transport = _RemoteTransport(config, client, backoff)

    def _raw_detect(self, image: RasterImage, labels: ProposalList, tau: float) -> list:
        body = self._transport.post(
            "/v1/detect",
            {
                "image_png_b64": imageio.png_b64(image),
                "labels": list(labels),
                "tau": tau,
            },
        )
        if "detections" not in body or not isinstance(body["detections"], list):
            raise ProtocolError("detect response missing detections list")
        return body["detections"]


# --- wiring -------------------------------------------------------------------

@dataclass
class BackendSet:
    """Resolved backend instances for one pipeline run."""

    segmenter: SegmenterBackend | None = None
    proposer: ProposerBackend | None = None
    detector: DetectorBackend | None = None

    def require_segmenter(self) -> SegmenterBackend:
        if self.segmenter is None:
            raise ConfigError("no segmenter backend configured")
        return self.segmenter

    def require_proposer(self) -> ProposerBackend:
        if self.proposer is None:
            raise ConfigError("no proposer backend configured")
        return self.proposer

    def require_detector(self) -> DetectorBackend:
        if self.detector is None:
            raise ConfigError("no detector backend configured")
        return self.detector


def build_backend(config: BackendEndpointConfig):
    if config.kind == "mock":
        if config.role is BackendRole.SEGMENTER:
            return MockSegmenter(config.target)
        if config.target is None:
            raise ConfigError(f"mock {config.role.value} backend requires a fixture dir")
        if config.role is BackendRole.PROPOSER:
            return MockProposer(config.target)
        return MockDetector(config.target)
    if config.role is BackendRole.SEGMENTER:
        return RemoteSegmenter(config)
    if config.role is BackendRole.PROPOSER:
        return RemoteProposer(config)
    return RemoteDetector(config)


def build_backends(configs: dict[BackendRole, BackendEndpointConfig]) -> BackendSet:
    backend_set = BackendSet()
    for role, config in configs.items():
        if config.role is not role:
            raise ConfigError(f"backend config for {role.value} carries role {config.role.value}")
        setattr(backend_set, role.value, build_backend(config))
    return backend_set
