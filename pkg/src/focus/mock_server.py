"""Reference HTTP server for the backend wire protocol, backed by the mocks.

Lets the remote adapters be exercised against a real implementation of the
documented routes, and doubles as a stand-in backend process during
development: ``uvicorn focus.mock_server:app`` style usage via
``create_backend_app``.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import imageio
from .backends import MockDetector, MockProposer, MockSegmenter
from .errors import FixtureMissError
from .geometry import BBox, BoxOutOfBoundsError
from .proposals import ProposalList


class SegmentBody(BaseModel):
    image_png_b64: str
    box: list[int] = Field(min_length=4, max_length=4)


class ProposeBody(BaseModel):
    image_png_b64: str
    prompt: str


class DetectBody(BaseModel):
    image_png_b64: str
    labels: list[str] = Field(min_length=1)
    tau: float = Field(ge=0.0, le=1.0)


def create_backend_app(fixture_dir: str | Path | None = None) -> FastAPI:
    """One app serving all three roles from a fixture directory.

    Without a fixture directory the segmenter answers with rectangle masks
    and the other roles answer 404 for everything.
    """
    segmenter = MockSegmenter(fixture_dir)
    proposer = MockProposer(fixture_dir) if fixture_dir else None
    detector = MockDetector(fixture_dir) if fixture_dir else None
    app = FastAPI(title="focus-mock-backend")

    @app.post("/v1/segment")
    def segment(body: SegmentBody):
        try:
            image = imageio.image_from_b64(body.image_png_b64)
            box = BBox(*body.box)
            mask = segmenter.segment(image, box)
        except (ValueError, BoxOutOfBoundsError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except FixtureMissError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"mask_png_b64": imageio.mask_png_b64(mask)}

    @app.post("/v1/propose")
    def propose(body: ProposeBody):
        if proposer is None:
            raise HTTPException(status_code=404, detail="no proposal fixtures loaded")
        try:
            image = imageio.image_from_b64(body.image_png_b64)
            raw = proposer.propose(image, body.prompt)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except FixtureMissError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"text": raw.text}

    @app.post("/v1/detect")
    def detect(body: DetectBody):
        if detector is None:
            raise HTTPException(status_code=404, detail="no detection fixtures loaded")
        try:
            image = imageio.image_from_b64(body.image_png_b64)
            labels = ProposalList.normalized(body.labels)
            detections = detector.detect(image, labels, body.tau)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except FixtureMissError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"detections": [d.to_dict() for d in detections]}

    return app
