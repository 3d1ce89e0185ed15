from __future__ import annotations

import json
import random

import numpy as np
import pytest

from focus import imageio
from focus.backends import (
    BackendEndpointConfig,
    BackendRole,
    BackendSet,
    MockDetector,
    MockProposer,
    MockSegmenter,
    enforce_detection_contract,
)
from focus.errors import PipelineStageError
from focus.evaluation import EvalCase
from focus.geometry import BBox, ContainmentPolicy, IsolationMode, RasterImage, crop
from focus.pipeline import (
    PipelineConfig,
    PipelineResult,
    RunError,
    VARIANT_BASELINE,
    VARIANT_FOCUS,
    batch_run,
    run_baseline,
    run_pipeline,
    serialize_results,
)
from focus.proposals import ProposalList, TaskPrompt, build_prompt, prompt_digest


def make_image(seed=3, size=8):
    rng = np.random.default_rng(seed)
    return RasterImage(rng.integers(0, 256, (size, size, 3), dtype=np.uint8))


PROMPT = TaskPrompt("list the objects")
BOX = BBox(2, 2, 6, 6)


def backend_configs(fixture_dir):
    return {
        BackendRole.SEGMENTER: BackendEndpointConfig(role=BackendRole.SEGMENTER, kind="mock"),
        BackendRole.PROPOSER: BackendEndpointConfig(
            role=BackendRole.PROPOSER, kind="mock", target=str(fixture_dir)),
        BackendRole.DETECTOR: BackendEndpointConfig(
            role=BackendRole.DETECTOR, kind="mock", target=str(fixture_dir)),
    }


def write_fixture_dir(tmp_path, image, box=BOX, proposal_text="belt, watch",
                      attended_detections=None, original_detections=None):
    """Fixtures keyed the way a segment-mask run with rectangle masks sees them:
    the attended image is exactly the crop of the original."""
    attended_digest = crop(image, box).digest()
    key = f"{attended_digest}:{prompt_digest(build_prompt(PROMPT))}"
    (tmp_path / "proposals.json").write_text(json.dumps({key: proposal_text}), "utf-8")
    detections = {}
    if attended_detections is not None:
        detections[attended_digest] = attended_detections
    if original_detections is not None:
        detections[image.digest()] = original_detections
    (tmp_path / "detections.json").write_text(json.dumps(detections), "utf-8")
    return tmp_path


def config_for(fixture_dir, mode=IsolationMode.SEGMENT_MASK, **kw):
    return PipelineConfig(prompt=PROMPT, backends=backend_configs(fixture_dir),
                          mode=mode, **kw)


class TestRunPipeline:
    def test_golden_fixture_run(self, tmp_path):
        image = make_image()
        write_fixture_dir(
            tmp_path, image,
            attended_detections=[{"label": "belt", "score": 0.9, "box": [0, 0, 3, 3]}],
        )
        result = run_pipeline(image, BOX, config_for(tmp_path), image_id="img")
        assert list(result.proposal) == ["belt", "watch"]
        assert len(result.detections) == 1
        det = result.detections[0]
        assert det.label == "belt" and det.score == 0.9
        assert result.attended.mode is IsolationMode.SEGMENT_MASK
        assert result.attended.origin == (2, 2)
        assert result.raw_proposal.text == "belt, watch"
        assert result.prompt_text == build_prompt(PROMPT)
        assert set(result.stage_timings) == {"segment", "propose", "detect"}
        assert result.diagnostics["dropped_detections"] == 0
        # detections map back to original coordinates through the recorded offset
        assert result.detections_original()[0].box == BBox(2, 2, 5, 5)

    def test_empty_proposal_aborts_before_detection(self, tmp_path):
        image = make_image()
        write_fixture_dir(tmp_path, image, proposal_text="...,")
        with pytest.raises(PipelineStageError) as err:
            run_pipeline(image, BOX, config_for(tmp_path))
        assert err.value.stage == "propose"

    def test_full_mode_zero_offset(self, tmp_path):
        image = make_image()
        digest = image.digest()
        key = f"{digest}:{prompt_digest(build_prompt(PROMPT))}"
        (tmp_path / "proposals.json").write_text(json.dumps({key: "belt, watch"}), "utf-8")
        (tmp_path / "detections.json").write_text(json.dumps({
            digest: [{"label": "watch", "score": 0.4, "box": [2, 2, 6, 6]}],
        }), "utf-8")
        configs = backend_configs(tmp_path)
        del configs[BackendRole.SEGMENTER]
        config = PipelineConfig(prompt=PROMPT, backends=configs, mode=IsolationMode.FULL)
        result = run_pipeline(image, BOX, config)
        assert list(result.proposal) == ["belt", "watch"]
        assert result.attended.origin == (0, 0)
        assert result.detections[0].box == result.detections_original()[0].box

    def test_stage_attribution_for_missing_fixture(self, tmp_path):
        image = make_image()
        (tmp_path / "proposals.json").write_text("{}", "utf-8")
        (tmp_path / "detections.json").write_text("{}", "utf-8")
        with pytest.raises(PipelineStageError) as err:
            run_pipeline(image, BOX, config_for(tmp_path))
        assert err.value.stage == "propose"

    def test_detect_stage_attribution(self, tmp_path):
        image = make_image()
        write_fixture_dir(tmp_path, image)  # no detection entry for attended digest
        with pytest.raises(PipelineStageError) as err:
            run_pipeline(image, BOX, config_for(tmp_path))
        assert err.value.stage == "detect"

    def test_box_out_of_bounds_is_input_stage(self, tmp_path):
        image = make_image()
        write_fixture_dir(tmp_path, image)
        with pytest.raises(PipelineStageError) as err:
            run_pipeline(image, BBox(0, 0, 99, 99), config_for(tmp_path))
        assert err.value.stage == "input"

    def test_segment_mask_requires_segmenter_config(self, tmp_path):
        configs = backend_configs(tmp_path)
        del configs[BackendRole.SEGMENTER]
        from focus.errors import ConfigError

        with pytest.raises(ConfigError):
            PipelineConfig(prompt=PROMPT, backends=configs, mode=IsolationMode.SEGMENT_MASK)


class TestRunBaseline:
    def test_containment_filter(self, tmp_path):
        image = make_image()
        write_fixture_dir(
            tmp_path, image,
            original_detections=[
                {"label": "belt", "score": 0.9, "box": [3, 3, 5, 5]},  # center inside
                {"label": "belt", "score": 0.8, "box": [0, 0, 2, 2]},  # center outside
            ],
        )
        labels = ProposalList(("belt",))
        result = run_baseline(image, BOX, labels, config_for(tmp_path))
        assert len(result.detections) == 1
        assert result.detections[0].score == 0.9
        assert result.variant == VARIANT_BASELINE
        assert result.attended.mode is IsolationMode.FULL
        assert result.raw_proposal.source == "reused"
        assert result.diagnostics["containment_filtered"] == 1

    def test_all_filtered_is_valid_result(self, tmp_path):
        image = make_image()
        write_fixture_dir(
            tmp_path, image,
            original_detections=[{"label": "belt", "score": 0.8, "box": [0, 0, 2, 2]}],
        )
        result = run_baseline(image, BOX, ProposalList(("belt",)), config_for(tmp_path))
        assert result.detections == ()

    def test_whole_image_box_filters_nothing(self, tmp_path):
        image = make_image()
        whole = BBox(0, 0, 8, 8)
        write_fixture_dir(
            tmp_path, image, box=whole,
            original_detections=[
                {"label": "belt", "score": 0.9, "box": [0, 0, 2, 2]},
                {"label": "watch", "score": 0.3, "box": [5, 5, 8, 8]},
            ],
        )
        for policy in (ContainmentPolicy.center_in(), ContainmentPolicy.fully_inside(),
                       ContainmentPolicy.ioa_at_least(0.9)):
            result = run_baseline(
                image, whole, ProposalList(("belt", "watch")),
                config_for(tmp_path, containment=policy),
            )
            assert len(result.detections) == 2

    def test_baseline_filter_soundness_brute_force(self, tmp_path):
        rng = random.Random(11)
        image = make_image(size=16)
        box = BBox(4, 4, 12, 12)
        dets = []
        for _ in range(30):
            x1, y1 = rng.randint(0, 14), rng.randint(0, 14)
            x2, y2 = rng.randint(x1 + 1, 16), rng.randint(y1 + 1, 16)
            dets.append({"label": "belt", "score": round(rng.uniform(0.2, 1.0), 3),
                         "box": [x1, y1, x2, y2]})
        write_fixture_dir(tmp_path, image, box=box, original_detections=dets)
        policy = ContainmentPolicy.center_in()
        result = run_baseline(image, box, ProposalList(("belt",)),
                              config_for(tmp_path, containment=policy))
        for det in result.detections:
            cx = (det.box.x_min + det.box.x_max) / 2
            cy = (det.box.y_min + det.box.y_max) / 2
            assert box.x_min <= cx < box.x_max and box.y_min <= cy < box.y_max


class TestClosureInvariants:
    def test_fuzzing_backend_cannot_breach_closures(self, tmp_path):
        rng = random.Random(5)
        image = make_image(size=10)
        box = BBox(1, 1, 9, 9)
        attended_digest = crop(image, box).digest()
        key = f"{attended_digest}:{prompt_digest(build_prompt(PROMPT))}"
        (tmp_path / "proposals.json").write_text(json.dumps({key: "belt, watch"}), "utf-8")
        raw = []
        violations = 0
        for _ in range(40):
            kind = rng.choice(["ok", "bad_label", "bad_score", "bad_box", "low_score"])
            entry = {"label": "belt", "score": 0.5, "box": [1, 1, 4, 4]}
            if kind == "bad_label":
                entry["label"] = "zeppelin"
                violations += 1
            elif kind == "bad_score":
                entry["score"] = rng.choice([1.5, -0.2])
                violations += 1
            elif kind == "bad_box":
                entry["box"] = rng.choice([[5, 5, 2, 2], [0, 0, 99, 4], [1, 1, 1, 1]])
                violations += 1
            elif kind == "low_score":
                entry["score"] = 0.05
            raw.append(entry)
        (tmp_path / "detections.json").write_text(
            json.dumps({attended_digest: raw}), "utf-8")
        result = run_pipeline(image, box, config_for(tmp_path, base_tau=0.1))
        for det in result.detections:
            assert det.label in result.proposal
            assert det.score >= 0.1
            det.box.require_within(result.attended.image.width, result.attended.image.height)
        assert result.diagnostics["dropped_detections"] == violations

    def test_result_invariants_enforced_at_construction(self, tmp_path):
        image = make_image()
        write_fixture_dir(
            tmp_path, image,
            attended_detections=[{"label": "belt", "score": 0.9, "box": [0, 0, 3, 3]}],
        )
        result = run_pipeline(image, BOX, config_for(tmp_path))
        from focus.backends import Detection

        with pytest.raises(ValueError):
            PipelineResult(
                image_id="x", variant=VARIANT_FOCUS, input_box=BOX,
                attended=result.attended, prompt_text="", raw_proposal=result.raw_proposal,
                proposal=result.proposal,
                detections=(Detection("zeppelin", 0.9, BBox(0, 0, 1, 1)),),
                base_tau=0.1,
            )

    def test_coordinate_roundtrip_exact(self, tmp_path):
        image = make_image(size=12)
        box = BBox(3, 2, 11, 10)
        attended_digest = crop(image, box).digest()
        key = f"{attended_digest}:{prompt_digest(build_prompt(PROMPT))}"
        (tmp_path / "proposals.json").write_text(json.dumps({key: "belt"}), "utf-8")
        (tmp_path / "detections.json").write_text(json.dumps({
            attended_digest: [{"label": "belt", "score": 0.7, "box": [1, 0, 5, 6]}],
        }), "utf-8")
        result = run_pipeline(image, box, config_for(tmp_path))
        att = result.attended
        for det in result.detections:
            assert att.to_attended(att.to_original(det.box)) == det.box


def make_cases(tmp_path, n=3, size=8):
    cases = []
    fixture_dir = tmp_path / "fixtures"
    fixture_dir.mkdir(exist_ok=True)
    proposals = {}
    detections = {}
    rendered = build_prompt(PROMPT)
    for i in range(n):
        image = make_image(seed=100 + i, size=size)
        path = tmp_path / f"img_{i}.png"
        imageio.save_png(image, path)
        box = BBox(1, 1, size - 1, size - 1)
        attended_digest = crop(image, box).digest()
        proposals[f"{attended_digest}:{prompt_digest(rendered)}"] = f"belt, item{i}"
        detections[attended_digest] = [
            {"label": "belt", "score": 0.5 + i / 10, "box": [0, 0, 2, 2]},
        ]
        detections[image.digest()] = [
            {"label": "belt", "score": 0.3, "box": [2, 2, 4, 4]},
        ]
        cases.append(EvalCase(image_id=f"img_{i}", image_path=str(path),
                              input_box=box, person_count=i))
    (fixture_dir / "proposals.json").write_text(json.dumps(proposals), "utf-8")
    (fixture_dir / "detections.json").write_text(json.dumps(detections), "utf-8")
    return cases, fixture_dir


class TestBatchRun:
    def test_results_in_case_order(self, tmp_path):
        cases, fixture_dir = make_cases(tmp_path)
        config = config_for(fixture_dir, parallelism=2)
        results = batch_run(cases, config, VARIANT_FOCUS)
        assert [r.image_id for r in results] == [c.case_id for c in cases]
        assert all(isinstance(r, PipelineResult) for r in results)

    def test_case_failure_is_isolated(self, tmp_path):
        cases, fixture_dir = make_cases(tmp_path, n=3)
        proposals_path = fixture_dir / "proposals.json"
        entries = json.loads(proposals_path.read_text("utf-8"))
        victim = sorted(entries)[1]
        del entries[victim]
        proposals_path.write_text(json.dumps(entries), "utf-8")
        config = config_for(fixture_dir)
        results = batch_run(cases, config, VARIANT_FOCUS)
        errors = [r for r in results if isinstance(r, RunError)]
        assert len(errors) == 1
        assert errors[0].stage == "propose"
        assert sum(isinstance(r, PipelineResult) for r in results) == 2

    def test_determinism_across_parallelism(self, tmp_path):
        cases, fixture_dir = make_cases(tmp_path, n=4)
        serialized = []
        for parallelism in (1, 4):
            config = config_for(fixture_dir, parallelism=parallelism)
            results = batch_run(cases, config, VARIANT_FOCUS)
            serialized.append(serialize_results(results))
        assert serialized[0] == serialized[1]

    def test_baseline_variant_with_reused_proposals(self, tmp_path):
        cases, fixture_dir = make_cases(tmp_path, n=2)
        config = config_for(fixture_dir)
        focus_results = batch_run(cases, config, VARIANT_FOCUS)
        reuse = [r.proposal for r in focus_results]
        baseline = batch_run(cases, config, VARIANT_BASELINE, reuse_proposals=reuse)
        assert all(isinstance(r, PipelineResult) for r in baseline)
        for focus_result, baseline_result in zip(focus_results, baseline):
            assert baseline_result.proposal == focus_result.proposal
            assert baseline_result.variant == VARIANT_BASELINE

    def test_unloadable_image_is_input_error(self, tmp_path):
        cases, fixture_dir = make_cases(tmp_path, n=2)
        broken = EvalCase(image_id="nope", image_path=str(tmp_path / "missing.png"),
                          input_box=BBox(0, 0, 2, 2), person_count=0)
        config = config_for(fixture_dir)
        results = batch_run([cases[0], broken], config, VARIANT_FOCUS)
        assert isinstance(results[0], PipelineResult)
        assert isinstance(results[1], RunError)
        assert results[1].stage == "input"


class TestSerialization:
    def test_versioned_document(self, tmp_path):
        image = make_image()
        write_fixture_dir(
            tmp_path, image,
            attended_detections=[{"label": "belt", "score": 0.9, "box": [0, 0, 3, 3]}],
        )
        result = run_pipeline(image, BOX, config_for(tmp_path), image_id="img")
        doc = result.to_dict(attended_png="att.png")
        assert doc["schema"] == "focus.pipeline_result/1"
        assert doc["attended_origin"] == [2, 2]
        assert doc["detections"][0]["box_attended"] == [0, 0, 3, 3]
        assert doc["detections"][0]["box_original"] == [2, 2, 5, 5]
        assert doc["attended_png"] == "att.png"
        assert "stage_timings" in doc
        assert "stage_timings" not in result.to_dict(include_timings=False)

    def test_document_matches_shipped_schema(self, tmp_path):
        jsonschema = pytest.importorskip("jsonschema")
        from importlib import resources

        schema = json.loads(
            resources.files("focus.assets").joinpath("pipeline_result.schema.json").read_text()
        )
        image = make_image()
        write_fixture_dir(
            tmp_path, image,
            attended_detections=[{"label": "belt", "score": 0.9, "box": [0, 0, 3, 3]}],
        )
        result = run_pipeline(image, BOX, config_for(tmp_path), image_id="img")
        jsonschema.validate(result.to_dict(attended_png="a.png"), schema)
