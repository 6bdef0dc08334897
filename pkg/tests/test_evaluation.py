"""Metrics, curves, one-pass evaluation, blend grid search, ablation table."""
import numpy as np
import pytest

from dualsiam import data, evaluation, networks, tracking
from dualsiam.errors import ContractViolationError
from dualsiam.evaluation import (
    BLEND_GRID,
    EvalReport,
    ReplayTracker,
    SequenceResult,
    StaticTracker,
    VARIANT_ORDER,
    ablation_table,
    grid_search_blend,
    model_tracker_factory,
    precision_at,
    precision_curve,
    run_ope,
    success_auc,
    success_curve,
)
from dualsiam.geometry import BoundingBox, center_error, iou
from dualsiam.profiles import DESK
from dualsiam.tracking import TrackConfig, TrackerModels


class TestIoU:
    def test_identical(self):
        b = BoundingBox(10, 10, 4, 6)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(10, 10, 2, 2)) == 0.0

    def test_half_overlapping_unit_squares(self):
        a = BoundingBox(0.5, 0.5, 1.0, 1.0)
        b = BoundingBox(1.0, 0.5, 1.0, 1.0)
        # intersection 0.5, union 1.5
        assert iou(a, b) == pytest.approx(1.0 / 3.0)


class TestCenterError:
    def test_identical(self):
        b = BoundingBox(3, 4, 2, 2)
        assert center_error(b, b) == 0.0

    def test_3_4_5(self):
        assert center_error(BoundingBox(0, 0, 1, 1), BoundingBox(3, 4, 1, 1)) == 5.0

    def test_matches_formula_random(self):
        rng = np.random.default_rng(70)
        for _ in range(20):
            ax, ay, bx, by = rng.uniform(0, 100, 4)
            a, b = BoundingBox(ax, ay, 5, 5), BoundingBox(bx, by, 5, 5)
            assert center_error(a, b) == pytest.approx(((ax - bx) ** 2 + (ay - by) ** 2) ** 0.5)


class TestSuccessAuc:
    def test_all_perfect_gives_20_21(self):
        assert success_auc(np.ones(50)) == pytest.approx(20.0 / 21.0)

    def test_constant_point_six(self):
        # strict '>' at thresholds {0, .05, ..., 1}: twelve are below 0.6
        assert success_auc(np.full(10, 0.6)) == pytest.approx(12.0 / 21.0)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolationError):
            success_auc(np.array([]))

    def test_curve_monotone_nonincreasing(self):
        rng = np.random.default_rng(71)
        for _ in range(20):
            curve = success_curve(rng.uniform(0, 1, 40))
            assert np.all(np.diff(curve) <= 1e-12)


class TestPrecision:
    def test_zero_errors(self):
        assert precision_at(np.zeros(5)) == 1.0

    def test_curve_monotone_nondecreasing(self):
        rng = np.random.default_rng(72)
        for _ in range(20):
            curve = precision_curve(rng.uniform(0, 80, 40))
            assert np.all(np.diff(curve) >= -1e-12)

    def test_threshold_semantics(self):
        errors = np.array([0.0, 20.0, 20.0001, 35.0])
        assert precision_at(errors, 20.0) == pytest.approx(2.0 / 4.0)


@pytest.fixture(scope="module")
def moving_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_seqs")
    specs = [
        data.SyntheticSpec(name="move0", frames=15, shape="disk", size=28.0,
                           start=(60.0, 80.0), velocity=(2.0, 1.0), clutter=2,
                           noise=0.02, seed=81),
        data.SyntheticSpec(name="move1", frames=15, shape="triangle", size=32.0,
                           start=(130.0, 70.0), velocity=(-1.5, 1.5), clutter=2,
                           noise=0.02, seed=82),
    ]
    return [data.load_sequence(data.generate_synthetic(s, root)) for s in specs]


class TestRunOpe:
    def test_replay_tracker_hits_analytic_maximum(self, moving_dataset):
        report = run_ope(moving_dataset, ReplayTracker)
        assert report.auc == pytest.approx(20.0 / 21.0)
        assert report.precision_at_20 == 1.0

    def test_sanity_ordering_static_below_real(self, moving_dataset, dual_models):
        static = run_ope(moving_dataset, StaticTracker)
        real = run_ope(moving_dataset, model_tracker_factory(dual_models, TrackConfig()))
        replay = run_ope(moving_dataset, ReplayTracker)
        assert static.auc < real.auc <= replay.auc

    def test_deterministic_metrics(self, moving_dataset, dual_models):
        factory = model_tracker_factory(dual_models, TrackConfig())
        r1 = run_ope(moving_dataset, factory)
        r2 = run_ope(moving_dataset, factory)
        assert r1.auc == r2.auc
        assert np.array_equal(r1.all_ious, r2.all_ious)
        assert np.array_equal(r1.all_errors, r2.all_errors)

    def test_jobs_parallel_same_metrics(self, moving_dataset, dual_models):
        factory = model_tracker_factory(dual_models, TrackConfig())
        serial = run_ope(moving_dataset, factory, jobs=1)
        parallel = run_ope(moving_dataset, factory, jobs=2)
        assert serial.auc == parallel.auc
        assert [r.name for r in serial.per_sequence] == [r.name for r in parallel.per_sequence]

    def test_broken_sequence_skipped_with_entry(self, moving_dataset, tmp_path):
        broken_dir = tmp_path / "broken"
        (broken_dir / "img").mkdir(parents=True)
        (broken_dir / "groundtruth_rect.txt").write_text("1,1,5,5\n" * 3)
        for i in range(3):
            (broken_dir / "img" / f"{i+1:04d}.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(3))
        broken = data.Sequence(
            name="broken",
            frame_paths=sorted((broken_dir / "img").iterdir()),
            boxes=[BoundingBox.from_topleft(1, 1, 5, 5)] * 3,
        )
        report = run_ope(list(moving_dataset) + [broken], ReplayTracker)
        assert len(report.per_sequence) == 2
        assert len(report.skipped) == 1
        assert "broken" in report.skipped[0]

    def test_empty_dataset_rejected(self):
        with pytest.raises(ContractViolationError):
            run_ope([], ReplayTracker)

    def test_report_serialization(self, moving_dataset, tmp_path):
        report = run_ope(moving_dataset, ReplayTracker)
        report.save_json(tmp_path / "report.json")
        report.save_curves_csv(tmp_path / "curves.csv")
        import json

        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["auc"] == pytest.approx(20.0 / 21.0)
        assert len(payload["success_curve"]) == 21
        assert len(payload["precision_curve"]) == 51
        lines = (tmp_path / "curves.csv").read_text().splitlines()
        assert lines[0] == "curve,threshold,value"
        assert len(lines) == 1 + 21 + 51


class TestAveragingConventions:
    def test_per_frame_differs_from_per_video(self):
        """Two sequences with different lengths and different quality."""
        good_short = SequenceResult("a", np.full(5, 0.9), np.zeros(5), 10.0)
        bad_long = SequenceResult("b", np.full(45, 0.1), np.full(45, 30.0), 10.0)
        report = EvalReport(per_sequence=[good_short, bad_long])
        per_frame = report.auc
        per_video = report.per_video_auc()
        assert per_frame != pytest.approx(per_video)
        # per-frame weighting is dominated by the long bad sequence
        assert per_frame < per_video


class TestBlendGrid:
    def test_grid_is_exactly_the_five_points(self):
        assert BLEND_GRID == (0.1, 0.3, 0.5, 0.7, 0.9)

    def test_search_table_complete(self, moving_dataset, dual_models):
        best, rows = grid_search_blend(dual_models, moving_dataset)
        assert [r["blend"] for r in rows] == list(BLEND_GRID)
        assert best in BLEND_GRID
        for r in rows:
            assert 0.0 <= r["auc"] <= 1.0
            assert 0.0 <= r["precision_at_20"] <= 1.0

    def test_scrambled_attention_pushes_blend_up(self, moving_dataset, trained_anet,
                                                 trained_backbone, trained_head):
        """Degenerate semantic branch: direction reported, not asserted."""
        rng = np.random.default_rng(73)
        scrambled = networks.SemanticHeadParams(
            taps=trained_head.taps,
            fusion=trained_head.fusion,
            attention={
                tap: networks.AttentionMlp(
                    (rng.standard_normal((9, 9)) * 3).astype(np.float32),
                    (rng.standard_normal(9) * 3).astype(np.float32),
                    (rng.standard_normal((9, 1)) * 3).astype(np.float32),
                    (rng.standard_normal(1) * 3).astype(np.float32),
                )
                for tap in trained_head.taps
            },
            adjust=trained_head.adjust,
        )
        models = TrackerModels(profile=DESK, appearance=trained_anet,
                               backbone=trained_backbone, head=scrambled)
        best, rows = grid_search_blend(models, moving_dataset[:1])
        print(f"scrambled-attention best blend: {best} "
              f"(aucs: {[round(r['auc'], 3) for r in rows]})")


class TestAblationTable:
    def test_structure_and_absences(self, moving_dataset, dual_models, appearance_models):
        variants = {key: None for key in VARIANT_ORDER}
        variants["appearance"] = appearance_models
        variants["app_sem_ml_att"] = dual_models
        rows = ablation_table(variants, moving_dataset)
        assert [r["variant"] for r in rows] == list(VARIANT_ORDER)
        by_name = {r["variant"]: r for r in rows}
        assert by_name["appearance"]["present"]
        assert by_name["appearance"]["auc"] is not None
        assert not by_name["semantic"]["present"]
        assert by_name["semantic"]["auc"] is None
        flags = by_name["app_sem_ml_att"]
        assert flags["appearance"] and flags["semantic"] and flags["multilevel"] and flags["attention"]

    def test_rerun_bit_exact(self, moving_dataset, dual_models):
        variants = {key: None for key in VARIANT_ORDER}
        variants["app_sem_ml_att"] = dual_models
        r1 = ablation_table(variants, moving_dataset)
        r2 = ablation_table(variants, moving_dataset)
        for a, b in zip(r1, r2):
            assert a["auc"] == b["auc"]
            assert a["precision_at_20"] == b["precision_at_20"]

    def test_csv_output(self, moving_dataset, appearance_models, tmp_path):
        variants = {key: None for key in VARIANT_ORDER}
        variants["appearance"] = appearance_models
        rows = ablation_table(variants, moving_dataset)
        evaluation.save_ablation_csv(rows, tmp_path / "ablation.csv")
        lines = (tmp_path / "ablation.csv").read_text().splitlines()
        assert len(lines) == 7
        assert "absent" in lines[2]
