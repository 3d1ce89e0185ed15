"""Scoring, cutoff sweeps, difficulty stratification, discrepancy reporting,
and COCO/VOC annotation ingestion.

Scoring treats the proposal list as ground truth and measures label-set
alignment between it and the detected labels; there is no box-level matching.
"""

from __future__ import annotations

import enum
import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

from .backends import Detection, round_half_away
from .errors import (
    AnnotationParseError,
    AnnotationSchemaError,
    BoxOutOfBoundsError,
    CaseSetMismatchError,
    EmptyLabelError,
)
from .geometry import BBox
from .pipeline import RunError
from .proposals import ProposalList, normalize_label

DEFAULT_CUTOFFS: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)

TASK_GRANULAR = "granular"
TASK_VEHICLES = "vehicles"

PERSON_LABEL = "person"


@dataclass(frozen=True)
class EvalCase:
    """One dataset item: an image, a query box, and the image's person count."""

    image_id: str
    image_path: str
    input_box: BBox
    person_count: int
    task: str = TASK_GRANULAR

    def __post_init__(self):
        if self.person_count < 0:
            raise ValueError(f"person_count must be >= 0, got {self.person_count}")

    @property
    def case_id(self) -> str:
        x1, y1, x2, y2 = self.input_box.as_tuple()
        return f"{self.image_id}:{x1}-{y1}-{x2}-{y2}"

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": str(self.image_path),
            "input_box": list(self.input_box.as_tuple()),
            "person_count": self.person_count,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalCase":
        return cls(
            image_id=doc["image_id"],
            image_path=doc["image_path"],
            input_box=BBox(*doc["input_box"]),
            person_count=doc["person_count"],
            task=doc["task"],
        )


def save_cases(cases, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case.to_dict(), sort_keys=True) + "\n")


def load_cases(path: str | Path) -> list[EvalCase]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(EvalCase.from_dict(json.loads(line)))
    return out


@dataclass(frozen=True)
class MatchReport:
    """Per-image alignment between the proposal set and the detected set."""

    recall: float
    precision: float
    f1: float
    matched: frozenset[str]
    missed: frozenset[str]
    spurious: frozenset[str]


def match_lists(proposal: ProposalList, detected_labels) -> MatchReport:
    """Recall, precision, F1 of detected labels against the proposal set.

    Both sides reduce to sets of normalized labels. Precision is 0 when
    nothing was detected; F1 is 0 when recall + precision is 0, else the
    harmonic mean 2RP/(R+P).
    """
    proposal_set = frozenset(proposal)
    detected_set = set()
    for raw in detected_labels:
        try:
            detected_set.add(normalize_label(raw))
        except EmptyLabelError:
            continue
    matched = frozenset(proposal_set & detected_set)
    recall = len(matched) / len(proposal_set)
    precision = len(matched) / len(detected_set) if detected_set else 0.0
    f1 = 0.0 if recall + precision == 0 else 2 * recall * precision / (recall + precision)
    return MatchReport(
        recall=recall,
        precision=precision,
        f1=f1,
        matched=matched,
        missed=frozenset(proposal_set - detected_set),
        spurious=frozenset(detected_set - proposal_set),
    )


def filter_by_cutoff(detections, cutoff: float) -> list[Detection]:
    """Keep detections scoring at or above the cutoff, order preserved."""
    return [d for d in detections if d.score >= cutoff]


class DifficultyGroup(enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


def difficulty_of(person_count: int) -> DifficultyGroup:
    """Difficulty stratum from the number of people in the image:
    easy for at most 2, medium for 3 to 7, hard for 8 or more."""
    if person_count < 0:
        raise ValueError(f"person count must be >= 0, got {person_count}")
    if person_count <= 2:
        return DifficultyGroup.EASY
    if person_count <= 7:
        return DifficultyGroup.MEDIUM
    return DifficultyGroup.HARD


# --- sweeps -------------------------------------------------------------------

@dataclass(frozen=True)
class SweepTable:
    """Aggregated F1 per (method, task) row and cutoff column."""

    cutoffs: tuple[float, ...]
    rows: tuple[tuple[str, str], ...]
    cells: dict
    n_images: dict
    aggregate: str = "macro"

    def f1(self, method: str, task: str, cutoff: float) -> float:
        return self.cells[(method, task, cutoff)]

    def to_csv(self) -> str:
        lines = ["method,task,cutoff,f1,n"]
        for method, task in self.rows:
            for cutoff in self.cutoffs:
                f1 = self.cells[(method, task, cutoff)]
                n = self.n_images[(method, task)]
                lines.append(f"{method},{task},{cutoff:g},{f1:.6f},{n}")
        return "\n".join(lines) + "\n"

    def to_json_obj(self) -> dict:
        return {
            "schema": "focus.sweep_table/1",
            "aggregate": self.aggregate,
            "cutoffs": list(self.cutoffs),
            "rows": [
                {
                    "method": method,
                    "task": task,
                    "n": self.n_images[(method, task)],
                    "f1_by_cutoff": {
                        f"{c:g}": self.cells[(method, task, c)] for c in self.cutoffs
                    },
                }
                for method, task in self.rows
            ],
        }


def _case_f1(result, cutoff: float) -> MatchReport | None:
    """Match report for one case at one cutoff; None for failed runs."""
    if isinstance(result, RunError):
        return None
    kept = filter_by_cutoff(result.detections, cutoff)
    return match_lists(result.proposal, [d.label for d in kept])


def _check_alignment(cases, results_by_method) -> None:
    n = len(cases)
    ids = None
    for method, results in results_by_method.items():
        if len(results) != n:
            raise CaseSetMismatchError(
                f"method {method!r} has {len(results)} results for {n} cases"
            )
        method_ids = [r.image_id for r in results]
        if ids is None:
            ids = method_ids
        elif method_ids != ids:
            raise CaseSetMismatchError(f"method {method!r} covers a different case set")


def sweep(cases, results_by_method, cutoffs=DEFAULT_CUTOFFS, aggregate: str = "macro") -> SweepTable:
    """Aggregate per-image F1 over the case set for each method, task, cutoff.

    ``aggregate`` is "macro" (mean of per-image F1, the default) or "micro"
    (pool matched/proposal/detected counts first, then score once). Failed
    runs contribute an F1 of 0 under macro and are skipped by micro pooling.
    """
    if aggregate not in ("macro", "micro"):
        raise ValueError(f"aggregate must be macro or micro, got {aggregate!r}")
    cases = list(cases)
    results_by_method = {m: list(rs) for m, rs in results_by_method.items()}
    _check_alignment(cases, results_by_method)
    tasks = []
    for case in cases:
        if case.task not in tasks:
            tasks.append(case.task)
    cutoffs = tuple(cutoffs)
    rows = []
    cells: dict = {}
    n_images: dict = {}
    for method, results in results_by_method.items():
        for task in tasks:
            indices = [i for i, case in enumerate(cases) if case.task == task]
            if not indices:
                continue
            rows.append((method, task))
            n_images[(method, task)] = len(indices)
            for cutoff in cutoffs:
                reports = [_case_f1(results[i], cutoff) for i in indices]
                if aggregate == "macro":
                    values = [r.f1 if r is not None else 0.0 for r in reports]
                    cells[(method, task, cutoff)] = sum(values) / len(values)
                else:
                    ok = [r for r in reports if r is not None]
                    matched = sum(len(r.matched) for r in ok)
                    proposed = sum(len(r.matched) + len(r.missed) for r in ok)
                    detected = sum(len(r.matched) + len(r.spurious) for r in ok)
                    recall = matched / proposed if proposed else 0.0
                    precision = matched / detected if detected else 0.0
                    cells[(method, task, cutoff)] = (
                        0.0 if recall + precision == 0
                        else 2 * recall * precision / (recall + precision)
                    )
    return SweepTable(
        cutoffs=cutoffs,
        rows=tuple(rows),
        cells=cells,
        n_images=n_images,
        aggregate=aggregate,
    )


def per_image_records(cases, results_by_method, cutoffs=DEFAULT_CUTOFFS):
    """One record per (method, case, cutoff), ready for JSON-lines output."""
    cases = list(cases)
    results_by_method = {m: list(rs) for m, rs in results_by_method.items()}
    _check_alignment(cases, results_by_method)
    records = []
    for method, results in results_by_method.items():
        for i, case in enumerate(cases):
            result = results[i]
            for cutoff in cutoffs:
                record = {
                    "method": method,
                    "image_id": case.image_id,
                    "case_id": case.case_id,
                    "task": case.task,
                    "cutoff": cutoff,
                }
                report = _case_f1(result, cutoff)
                if report is None:
                    record.update(
                        recall=0.0, precision=0.0, f1=0.0,
                        matched=[], missed=[], spurious=[],
                        error=f"{result.stage}: {result.message}",
                    )
                else:
                    record.update(
                        recall=report.recall,
                        precision=report.precision,
                        f1=report.f1,
                        matched=sorted(report.matched),
                        missed=sorted(report.missed),
                        spurious=sorted(report.spurious),
                        error=None,
                    )
                records.append(record)
    return records


def difficulty_summary(cases, results_by_method, cutoffs=DEFAULT_CUTOFFS) -> dict:
    """Macro F1 per difficulty group, per method, per cutoff."""
    cases = list(cases)
    results_by_method = {m: list(rs) for m, rs in results_by_method.items()}
    _check_alignment(cases, results_by_method)
    summary: dict = {"schema": "focus.difficulty_summary/1", "groups": {}}
    for group in DifficultyGroup:
        indices = [
            i for i, case in enumerate(cases)
            if difficulty_of(case.person_count) is group
        ]
        entry: dict = {"n": len(indices), "methods": {}}
        for method, results in results_by_method.items():
            by_cutoff = {}
            for cutoff in cutoffs:
                if indices:
                    values = []
                    for i in indices:
                        report = _case_f1(results[i], cutoff)
                        values.append(report.f1 if report is not None else 0.0)
                    by_cutoff[f"{cutoff:g}"] = sum(values) / len(values)
                else:
                    by_cutoff[f"{cutoff:g}"] = None
            entry["methods"][method] = by_cutoff
        summary["groups"][group.value] = entry
    return summary


# --- discrepancy reporting ------------------------------------------------------

@dataclass(frozen=True)
class LabelDiscrepancy:
    label: str
    discrepancy: float
    cases: int


def _best_scores(result) -> dict[str, float]:
    best: dict[str, float] = {}
    if isinstance(result, RunError):
        return best
    for det in result.detections:
        if det.score > best.get(det.label, 0.0):
            best[det.label] = det.score
    return best


def discrepancy_report(
    baseline_results,
    focus_results,
    min_count: int,
    top_k: int,
) -> list[LabelDiscrepancy]:
    """Labels ranked by how much better the pipeline detects them than the
    baseline: per label appearing in at least ``min_count`` cases' proposals,
    the mean per-case best detection score under the pipeline minus the mean
    under the baseline (a case without a detection contributes 0). Ties break
    lexicographically."""
    baseline_results = list(baseline_results)
    focus_results = list(focus_results)
    if len(baseline_results) != len(focus_results):
        raise CaseSetMismatchError(
            f"{len(baseline_results)} baseline vs {len(focus_results)} pipeline results"
        )
    for b, f in zip(baseline_results, focus_results):
        if b.image_id != f.image_id:
            raise CaseSetMismatchError(
                f"case order differs: {b.image_id!r} vs {f.image_id!r}"
            )
    per_label: dict[str, list[tuple[float, float]]] = {}
    for b, f in zip(baseline_results, focus_results):
        if isinstance(f, RunError):
            continue
        base_best = _best_scores(b)
        focus_best = _best_scores(f)
        for label in f.proposal:
            per_label.setdefault(label, []).append(
                (focus_best.get(label, 0.0), base_best.get(label, 0.0))
            )
    out = []
    for label, pairs in per_label.items():
        if len(pairs) < min_count:
            continue
        mean_focus = sum(p[0] for p in pairs) / len(pairs)
        mean_base = sum(p[1] for p in pairs) / len(pairs)
        out.append(LabelDiscrepancy(label, mean_focus - mean_base, len(pairs)))
    out.sort(key=lambda d: (-d.discrepancy, d.label))
    return out[:top_k]


# --- annotation ingestion -------------------------------------------------------

def _corner_box(x, y, w, h) -> BBox:
    x1 = round_half_away(float(x))
    y1 = round_half_away(float(y))
    x2 = round_half_away(float(x) + float(w))
    y2 = round_half_away(float(y) + float(h))
    return BBox(x1, y1, x2, y2)


def ingest_coco(
    annotation_file: str | Path,
    target_categories,
    image_root: str | Path | None = None,
    task: str = TASK_GRANULAR,
) -> list[EvalCase]:
    """Cases from a COCO-style instances document: one case per annotation of
    a target category, with the image's person count attached."""
    annotation_file = Path(annotation_file)
    image_root = Path(image_root) if image_root is not None else annotation_file.parent
    try:
        doc = json.loads(annotation_file.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(
            f"{annotation_file}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    except OSError as exc:
        raise AnnotationParseError(f"{annotation_file}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise AnnotationSchemaError(f"{annotation_file}: missing {key!r} array")

    targets = {normalize_label(t) for t in target_categories}
    try:
        category_names = {c["id"]: normalize_label(str(c["name"])) for c in doc["categories"]}
        images = {
            im["id"]: {"file_name": str(im["file_name"])}
            for im in doc["images"]
        }
    except (KeyError, TypeError, EmptyLabelError) as exc:
        raise AnnotationSchemaError(f"{annotation_file}: {exc!r}") from exc

    person_counts: dict = {im_id: 0 for im_id in images}
    for ann in doc["annotations"]:
        if not isinstance(ann, dict) or "category_id" not in ann or "image_id" not in ann:
            raise AnnotationSchemaError(f"{annotation_file}: annotation missing keys: {ann!r}")
        if ann["category_id"] not in category_names:
            raise AnnotationSchemaError(
                f"{annotation_file}: unknown category id {ann['category_id']!r}"
            )
        if ann["image_id"] not in images:
            raise AnnotationSchemaError(
                f"{annotation_file}: unknown image id {ann['image_id']!r}"
            )
        if category_names[ann["category_id"]] == PERSON_LABEL:
            person_counts[ann["image_id"]] += 1

    cases = []
    for ann in doc["annotations"]:
        if category_names[ann["category_id"]] not in targets:
            continue
        if "bbox" not in ann or len(ann["bbox"]) != 4:
            raise AnnotationSchemaError(f"{annotation_file}: annotation missing bbox: {ann!r}")
        try:
            box = _corner_box(*ann["bbox"])
        except (BoxOutOfBoundsError, TypeError, ValueError) as exc:
            raise AnnotationSchemaError(
                f"{annotation_file}: bad bbox {ann['bbox']!r}: {exc}"
            ) from exc
        image = images[ann["image_id"]]
        cases.append(
            EvalCase(
                image_id=str(ann["image_id"]),
                image_path=str(image_root / image["file_name"]),
                input_box=box,
                person_count=person_counts[ann["image_id"]],
                task=task,
            )
        )
    return cases


def ingest_voc(
    annotation_dir: str | Path,
    target_categories,
    image_root: str | Path | None = None,
    task: str = TASK_VEHICLES,
) -> list[EvalCase]:
    """Cases from a directory of VOC-style XML documents: one case per object
    of a target class, with the document's person count attached."""
    annotation_dir = Path(annotation_dir)
    image_root = Path(image_root) if image_root is not None else annotation_dir
    targets = {normalize_label(t) for t in target_categories}
    cases = []
    for xml_path in sorted(annotation_dir.glob("*.xml")):
        try:
            root = ET.parse(xml_path).getroot()
        except ET.ParseError as exc:
            raise AnnotationParseError(f"{xml_path}: {exc}") from exc
        objects = root.findall("object")
        person_count = 0
        parsed = []
        for obj in objects:
            name_el = obj.find("name")
            if name_el is None or not (name_el.text or "").strip():
                raise AnnotationSchemaError(f"{xml_path}: object without a name")
            name = normalize_label(name_el.text)
            if name == PERSON_LABEL:
                person_count += 1
            parsed.append((name, obj))
        filename_el = root.find("filename")
        file_name = (
            (filename_el.text or "").strip()
            if filename_el is not None and (filename_el.text or "").strip()
            else xml_path.stem + ".png"
        )
        for name, obj in parsed:
            if name not in targets:
                continue
            bndbox = obj.find("bndbox")
            if bndbox is None:
                raise AnnotationSchemaError(f"{xml_path}: object {name!r} without bndbox")
            coords = {}
            for tag in ("xmin", "ymin", "xmax", "ymax"):
                el = bndbox.find(tag)
                if el is None or not (el.text or "").strip():
                    raise AnnotationSchemaError(f"{xml_path}: bndbox missing {tag}")
                try:
                    coords[tag] = round_half_away(float(el.text))
                except ValueError as exc:
                    raise AnnotationSchemaError(
                        f"{xml_path}: bndbox {tag} not numeric: {el.text!r}"
                    ) from exc
            try:
                box = BBox(coords["xmin"], coords["ymin"], coords["xmax"], coords["ymax"])
            except BoxOutOfBoundsError as exc:
                raise AnnotationSchemaError(f"{xml_path}: invalid box: {exc}") from exc
            cases.append(
                EvalCase(
                    image_id=xml_path.stem,
                    image_path=str(image_root / file_name),
                    input_box=box,
                    person_count=person_count,
                    task=task,
                )
            )
    return cases
