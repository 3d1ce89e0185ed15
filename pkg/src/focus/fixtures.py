"""Deterministic synthetic corpus generation for offline runs and tests.

One seed produces a byte-identical directory tree: images, segmenter mask
fixtures, proposer/detector fixture documents, COCO- and VOC-style
annotations, and a ready-to-use run config. The generator composes the real
geometry operations, so fixture keys (content digests of attended images)
always line up with what the pipeline computes at run time.

Fixture construction mirrors the evaluation asymmetry: detector fixtures for
the untouched image include distractor detections placed outside every query
box, while per-label scores there never exceed the attended-image scores.
"""

from __future__ import annotations

import json
import random
import zlib
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .backends import DETECTIONS_FILENAME, MASKS_DIRNAME, PROPOSALS_FILENAME, mask_fixture_name, proposal_fixture_key
from .geometry import BBox, BinaryMask, IsolationMode, RasterImage, isolate_region
from .proposals import build_prompt, default_prompt, prompt_digest

GRANULAR_VOCAB = [
    "belt", "watch", "sunglasses", "hat", "jacket", "shoe",
    "scarf", "glove", "tie", "backpack", "ring", "camera",
]
VEHICLE_VOCAB = [
    "wheel", "headlight", "mirror", "bumper",
    "license plate", "windshield", "door handle", "antenna",
]

_PALETTE = [
    (198, 53, 53), (53, 112, 198), (53, 198, 87), (198, 170, 53),
    (140, 53, 198), (53, 186, 198), (198, 53, 141), (120, 198, 53),
    (198, 110, 53), (80, 80, 200), (20, 140, 140), (160, 60, 60),
]
_BACKGROUNDS = [
    (222, 222, 214), (205, 214, 222), (214, 222, 205),
    (226, 217, 203), (210, 210, 220), (218, 206, 214),
]
_SKIN_TONES = [(224, 189, 160), (188, 143, 110), (150, 102, 74), (235, 204, 178)]

# Person boxes live in a 4x3 grid of 40x40 cells in the top band of a
# 160x160 image; the bottom band stays person-free so distractor boxes are
# guaranteed disjoint from every query region.
IMG_SIZE = 160
_CELL = 40
_GRID_COLS = 4
_GRID_ROWS = 3
_DISTRACTOR_Y = 124

# Person counts across the default 12 images, covering every difficulty group.
_PERSON_COUNTS = [1, 1, 2, 2, 3, 4, 5, 6, 7, 8, 9, 12]

VOC_IMG_SIZE = 120
_VOC_OBJECT_BAND = 78
_VOC_DISTRACTOR_Y = 92


def _label_color(label: str) -> tuple[int, int, int]:
    return _PALETTE[zlib.crc32(label.encode("utf-8")) % len(_PALETTE)]


def _paint_rect(canvas: np.ndarray, box: BBox, color: tuple[int, int, int]) -> None:
    canvas[box.y_min:box.y_max, box.x_min:box.x_max] = color


def _ellipse_mask(width: int, height: int, box: BBox) -> BinaryMask:
    cy = (box.y_min + box.y_max - 1) / 2
    cx = (box.x_min + box.x_max - 1) / 2
    ry = max(box.height / 2, 1.0)
    rx = max(box.width / 2, 1.0)
    yy, xx = np.mgrid[0:height, 0:width]
    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    return BinaryMask(inside)


def _random_inner_box(rng: random.Random, outer_w: int, outer_h: int) -> BBox:
    w = rng.randint(3, max(3, min(9, outer_w - 1)))
    h = rng.randint(3, max(3, min(9, outer_h - 1)))
    x1 = rng.randint(outer_w // 4, max(outer_w // 4, outer_w - w - 1))
    y1 = rng.randint(outer_h // 4, max(outer_h // 4, outer_h - h - 1))
    return BBox(x1, y1, x1 + w, y1 + h)


def _render_proposal_text(rng: random.Random, labels: list[str]) -> str:
    style = rng.randint(0, 2)
    if style == 0:
        return ", ".join(label.title() for label in labels)
    if style == 1:
        return "\n".join(f"{i + 1}. {label.title()}" for i, label in enumerate(labels))
    return "; ".join(labels)


@dataclass
class CorpusInfo:
    out_dir: Path
    n_images: int
    n_cases: int
    n_voc_images: int
    n_voc_cases: int


class _FixtureSink:
    """Accumulates fixture entries and writes them deterministically."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.proposals: dict[str, str] = {}
        self.detections: dict[str, list] = {}
        (out_dir / MASKS_DIRNAME).mkdir(parents=True, exist_ok=True)

    def add_mask(self, image_digest: str, box: BBox, mask: BinaryMask) -> None:
        path = self.out_dir / MASKS_DIRNAME / mask_fixture_name(image_digest, box)
        imageio.save_mask_png(mask, path)

    def add_proposal(self, image_digest: str, digest_of_prompt: str, text: str) -> None:
        self.proposals[proposal_fixture_key(image_digest, digest_of_prompt)] = text

    def add_detections(self, image_digest: str, items: list) -> None:
        self.detections.setdefault(image_digest, []).extend(items)

    def ensure_detection_key(self, image_digest: str) -> None:
        self.detections.setdefault(image_digest, [])

    def flush(self) -> None:
        (self.out_dir / PROPOSALS_FILENAME).write_text(
            json.dumps(self.proposals, sort_keys=True, indent=2) + "\n", "utf-8"
        )
        (self.out_dir / DETECTIONS_FILENAME).write_text(
            json.dumps(self.detections, sort_keys=True, indent=2) + "\n", "utf-8"
        )


def _make_case_fixtures(
    rng: random.Random,
    sink: _FixtureSink,
    image: RasterImage,
    orig_digest: str,
    box: BBox,
    vocab: list[str],
    rendered_prompt: str,
) -> None:
    """Mask, proposal, and detection fixtures for one (image, box) query."""
    mask = _ellipse_mask(image.width, image.height, box)
    sink.add_mask(orig_digest, box, mask)
    attended = isolate_region(image, box, mask, IsolationMode.SEGMENT_MASK, (0, 0, 0))
    attended_digest = attended.image.digest()

    labels = rng.sample(vocab, k=rng.randint(3, 5))
    sink.add_proposal(attended_digest, prompt_digest(rendered_prompt), _render_proposal_text(rng, labels))

    focus_items = []
    baseline_items = []
    for label in labels:
        if rng.random() >= 0.85:
            continue
        score = round(rng.uniform(0.25, 0.95), 3)
        det_box = _random_inner_box(rng, attended.image.width, attended.image.height)
        focus_items.append({"label": label, "score": score, "box": list(det_box.as_tuple())})
        if rng.random() < 0.7:
            weaker = round(score * rng.uniform(0.4, 0.9), 3)
            inner = _random_inner_box(rng, box.width, box.height)
            placed = inner.translate(box.x_min, box.y_min)
            baseline_items.append({"label": label, "score": weaker, "box": list(placed.as_tuple())})
    # Distractors sit in the person-free band, disjoint from every query box,
    # so containment filtering removes them from any baseline evaluation.
    for _ in range(rng.randint(1, 2)):
        label = rng.choice(labels)
        score = round(rng.uniform(0.3, 0.95), 3)
        size = rng.randint(4, 8)
        x1 = rng.randint(0, image.width - size - 1)
        y_low = _DISTRACTOR_Y if image.height == IMG_SIZE else _VOC_DISTRACTOR_Y
        y1 = rng.randint(y_low, image.height - size - 1)
        baseline_items.append(
            {"label": label, "score": score, "box": [x1, y1, x1 + size, y1 + size]}
        )
    sink.add_detections(attended_digest, focus_items)
    sink.add_detections(orig_digest, baseline_items)


def _generate_people_images(rng: random.Random, out_dir: Path, sink: _FixtureSink,
                            n_images: int, rendered_prompt: str) -> tuple[int, list[dict]]:
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    coco_images = []
    coco_annotations = []
    n_cases = 0
    ann_id = 1
    counts = list(_PERSON_COUNTS)
    while len(counts) < n_images:
        counts.append(rng.randint(1, 12))
    counts = counts[:n_images]

    for idx in range(n_images):
        canvas = np.empty((IMG_SIZE, IMG_SIZE, 3), dtype=np.uint8)
        canvas[:, :] = _BACKGROUNDS[idx % len(_BACKGROUNDS)]
        p = counts[idx]
        cells = rng.sample(range(_GRID_COLS * _GRID_ROWS), p)
        person_boxes = []
        case_objects = []
        for cell in sorted(cells):
            col, row = cell % _GRID_COLS, cell // _GRID_COLS
            w, h = rng.randint(24, 34), rng.randint(24, 34)
            x1 = col * _CELL + rng.randint(1, _CELL - w - 1)
            y1 = row * _CELL + rng.randint(1, _CELL - h - 1)
            box = BBox(x1, y1, x1 + w, y1 + h)
            person_boxes.append(box)
            _paint_rect(canvas, box, rng.choice(_SKIN_TONES))
            objects = []
            for _ in range(rng.randint(2, 4)):
                inner = _random_inner_box(rng, box.width, box.height)
                placed = inner.translate(box.x_min, box.y_min)
                color = _label_color(rng.choice(GRANULAR_VOCAB))
                _paint_rect(canvas, placed, color)
                objects.append(placed)
            case_objects.append(objects)
        # Visual-only clutter in the person-free band.
        for _ in range(rng.randint(2, 4)):
            size = rng.randint(5, 10)
            x1 = rng.randint(0, IMG_SIZE - size - 1)
            y1 = rng.randint(_DISTRACTOR_Y, IMG_SIZE - size - 1)
            _paint_rect(canvas, BBox(x1, y1, x1 + size, y1 + size), rng.choice(_PALETTE))

        image = RasterImage(canvas)
        file_name = f"images/img_{idx:03d}.png"
        imageio.save_png(image, out_dir / file_name)
        orig_digest = image.digest()
        sink.ensure_detection_key(orig_digest)

        image_id = idx + 1
        coco_images.append(
            {"id": image_id, "file_name": file_name, "width": IMG_SIZE, "height": IMG_SIZE}
        )
        for box in person_boxes:
            coco_annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": 1,
                    "bbox": [box.x_min, box.y_min, box.width, box.height],
                }
            )
            ann_id += 1
            n_cases += 1
            _make_case_fixtures(rng, sink, image, orig_digest, box, GRANULAR_VOCAB, rendered_prompt)

    coco_doc = {
        "images": coco_images,
        "annotations": coco_annotations,
        "categories": [{"id": 1, "name": "person"}],
    }
    (out_dir / "coco.json").write_text(
        json.dumps(coco_doc, sort_keys=True, indent=2) + "\n", "utf-8"
    )
    return n_cases, coco_annotations


def _generate_vehicle_images(rng: random.Random, out_dir: Path, sink: _FixtureSink,
                             n_images: int, rendered_prompt: str) -> tuple[int, int]:
    voc_dir = out_dir / "voc"
    voc_dir.mkdir(parents=True, exist_ok=True)
    n_cases = 0
    for idx in range(n_images):
        canvas = np.empty((VOC_IMG_SIZE, VOC_IMG_SIZE, 3), dtype=np.uint8)
        canvas[:, :] = _BACKGROUNDS[(idx + 3) % len(_BACKGROUNDS)]
        n_cars = rng.randint(1, 2)
        boxes = []
        for k in range(n_cars):
            w, h = rng.randint(30, 44), rng.randint(24, 34)
            half = VOC_IMG_SIZE // 2
            x1 = k * half + rng.randint(2, half - w - 2)
            y1 = rng.randint(4, _VOC_OBJECT_BAND - h - 4)
            box = BBox(x1, y1, x1 + w, y1 + h)
            boxes.append(box)
            _paint_rect(canvas, box, _PALETTE[(idx + k) % len(_PALETTE)])
            for _ in range(rng.randint(2, 3)):
                inner = _random_inner_box(rng, box.width, box.height)
                _paint_rect(canvas, inner.translate(box.x_min, box.y_min),
                            _label_color(rng.choice(VEHICLE_VOCAB)))

        image = RasterImage(canvas)
        file_name = f"voc_{idx:03d}.png"
        imageio.save_png(image, voc_dir / file_name)
        orig_digest = image.digest()
        sink.ensure_detection_key(orig_digest)

        root = ET.Element("annotation")
        ET.SubElement(root, "filename").text = file_name
        size = ET.SubElement(root, "size")
        ET.SubElement(size, "width").text = str(VOC_IMG_SIZE)
        ET.SubElement(size, "height").text = str(VOC_IMG_SIZE)
        ET.SubElement(size, "depth").text = "3"
        for box in boxes:
            obj = ET.SubElement(root, "object")
            ET.SubElement(obj, "name").text = "car"
            bnd = ET.SubElement(obj, "bndbox")
            ET.SubElement(bnd, "xmin").text = str(box.x_min)
            ET.SubElement(bnd, "ymin").text = str(box.y_min)
            ET.SubElement(bnd, "xmax").text = str(box.x_max)
            ET.SubElement(bnd, "ymax").text = str(box.y_max)
            n_cases += 1
            _make_case_fixtures(rng, sink, image, orig_digest, box, VEHICLE_VOCAB, rendered_prompt)
        ET.indent(root)
        (voc_dir / f"voc_{idx:03d}.xml").write_bytes(ET.tostring(root, encoding="utf-8"))
    return n_images, n_cases


def _write_corpus_config(out_dir: Path) -> None:
    config = {
        "mode": "segment_mask",
        "fill": [0, 0, 0],
        "base_tau": 0.1,
        "containment": {"policy": "center_in"},
        "parallelism": 1,
        "cutoffs": [0.2, 0.4, 0.6, 0.8],
        "backends": {
            "segmenter": {"kind": "mock", "target": "."},
            "proposer": {"kind": "mock", "target": "."},
            "detector": {"kind": "mock", "target": "."},
        },
    }
    (out_dir / "corpus_config.json").write_text(
        json.dumps(config, sort_keys=True, indent=2) + "\n", "utf-8"
    )


def generate_corpus(seed: int, out_dir: str | Path, n_images: int = 12,
                    n_voc_images: int = 3) -> CorpusInfo:
    """Generate the full synthetic corpus under ``out_dir``.

    Identical seeds produce byte-identical trees (same library versions
    assumed for PNG encoding). Raises OSError when the directory cannot be
    written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    sink = _FixtureSink(out_dir)
    rendered_prompt = build_prompt(default_prompt())
    n_cases, _ = _generate_people_images(rng, out_dir, sink, n_images, rendered_prompt)
    n_voc, n_voc_cases = _generate_vehicle_images(rng, out_dir, sink, n_voc_images, rendered_prompt)
    sink.flush()
    _write_corpus_config(out_dir)
    return CorpusInfo(
        out_dir=out_dir,
        n_images=n_images,
        n_cases=n_cases,
        n_voc_images=n_voc,
        n_voc_cases=n_voc_cases,
    )
