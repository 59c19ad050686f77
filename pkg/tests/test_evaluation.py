import os

import numpy as np
import pytest
import torch

from tbattr.config import Config
from tbattr.data import load_manifest
from tbattr.errors import EmptyList, MissingBaseline, OutOfRange, ShapeError
from tbattr.evaluation import (
    EvalReport,
    METRICS,
    ROW_ORDER,
    ablation_report,
    aggregate_runs,
    compute_accuracy,
    compute_f_score,
    compute_map,
    compute_pr_curve,
    evaluate_model,
    match_detections,
    row_key,
    write_ablation_report,
)


class TestAccuracy:
    def test_perfect(self):
        assert compute_accuracy([[0.9, 0.1], [0.2, 0.8]], [[1, 0], [0, 1]]) == 1.0

    def test_three_quarters(self):
        probs = [[0.9, 0.1], [0.9, 0.8]]
        labels = [[1, 0], [0, 1]]
        assert compute_accuracy(probs, labels) == 0.75

    def test_half_probability_predicts_positive(self):
        assert compute_accuracy([[0.5]], [[1]]) == 1.0
        assert compute_accuracy([[0.5]], [[0]]) == 0.0

    def test_accepts_tensors(self):
        probs = torch.tensor([[0.9, 0.2]])
        labels = torch.tensor([[1.0, 0.0]])
        assert compute_accuracy(probs, labels) == 1.0

    def test_errors(self):
        with pytest.raises(ShapeError):
            compute_accuracy([[0.5]], [[0.5, 0.5]])
        with pytest.raises(ShapeError):
            compute_accuracy([0.5], [1])
        with pytest.raises(EmptyList):
            compute_accuracy(np.zeros((0, 3)), np.zeros((0, 3)))


class TestFScore:
    def test_balanced_half(self):
        probs = [[1], [1], [0], [0]]
        labels = [[1], [0], [1], [0]]
        assert compute_f_score(probs, labels) == 0.5

    def test_perfect(self):
        probs = [[0.9, 0.1], [0.1, 0.9]]
        labels = [[1, 0], [0, 1]]
        assert compute_f_score(probs, labels) == 1.0

    def test_empty_column_scores_zero(self):
        # Second attribute never occurs and is never predicted: macro mean
        # counts it as zero rather than skipping it.
        probs = [[0.9, 0.1], [0.9, 0.1]]
        labels = [[1, 0], [1, 0]]
        assert compute_f_score(probs, labels) == 0.5

    def test_macro_averages_per_attribute(self):
        probs = [[0.9, 0.9], [0.9, 0.9]]
        labels = [[1, 1], [1, 0]]
        # col 0: P=R=1; col 1: P=0.5, R=1 -> F=2/3
        assert compute_f_score(probs, labels) == pytest.approx((1.0 + 2 / 3) / 2)


def _fp_box(slot):
    y = 1000.0 + 100.0 * slot
    return [0.0, y, 10.0, y + 10.0]


def _gt_box(slot):
    x = 100.0 * slot
    return [x, 0.0, x + 10.0, 10.0]


def _case(flags, n_gt):
    """One-image detection problem whose ranked TP/FP flags equal `flags`."""
    dets, used_gts, fp_slot = [], 0, 0
    for rank, flag in enumerate(flags):
        score = 1.0 - 0.01 * rank
        if flag:
            dets.append(_gt_box(used_gts) + [score])
            used_gts += 1
        else:
            dets.append(_fp_box(fp_slot) + [score])
            fp_slot += 1
    gts = [_gt_box(i) for i in range(n_gt)]
    return [dets], [gts]


def _ap_by_definition(flags, n_gt):
    """All-point interpolated AP computed straight from the definition."""
    tp = 0
    precisions, recalls = [], []
    for j, flag in enumerate(flags):
        tp += int(flag)
        precisions.append(tp / (j + 1))
        recalls.append(tp / n_gt)
    total, prev = 0.0, 0.0
    for j in range(len(flags)):
        if recalls[j] > prev:
            total += (recalls[j] - prev) * max(precisions[j:])
            prev = recalls[j]
    return total


class TestDetectionMatching:
    def test_single_true_positive(self):
        dets, gts = _case([True], n_gt=1)
        flags, n = match_detections(dets, gts)
        assert flags == [True] and n == 1
        assert compute_map(dets, gts) == 1.0

    def test_all_misses(self):
        dets, gts = _case([False, False], n_gt=1)
        assert compute_map(dets, gts) == 0.0

    def test_late_hit_halves_precision(self):
        dets, gts = _case([False, True], n_gt=1)
        assert compute_map(dets, gts) == 0.5

    def test_duplicate_detection_is_false_positive(self):
        gt = [_gt_box(0)]
        dets = [[_gt_box(0) + [0.9], _gt_box(0) + [0.8]]]
        flags, _ = match_detections(dets, [gt])
        assert flags == [True, False]

    def test_iou_threshold_gates_match(self):
        gts = [[[0.0, 0.0, 10.0, 10.0]]]
        dets = [[[0.0, 5.0, 10.0, 15.0, 0.9]]]  # iou 1/3
        flags, _ = match_detections(dets, gts, iou_thr=0.5)
        assert flags == [False]
        flags, _ = match_detections(dets, gts, iou_thr=0.3)
        assert flags == [True]

    def test_score_tie_breaks_by_detection_index(self):
        gts = [[_gt_box(0)]]
        miss, hit = _fp_box(0) + [0.9], _gt_box(0) + [0.9]
        assert compute_map([[miss, hit]], gts) == 0.5
        assert compute_map([[hit, miss]], gts) == 1.0

    def test_detection_order_ignored_when_scores_differ(self, rng):
        dets, gts = _case([True, False, True, False, True], n_gt=4)
        base = compute_map(dets, gts)
        shuffled = list(dets[0])
        rng.shuffle(shuffled)
        assert compute_map([shuffled], gts) == pytest.approx(base, abs=1e-12)

    def test_mismatched_image_lists(self):
        with pytest.raises(ShapeError):
            match_detections([[]], [[], []])

    def test_pr_curve_shapes(self):
        dets, gts = _case([True, False], n_gt=2)
        precision, recall = compute_pr_curve(dets, gts)
        assert precision.tolist() == [1.0, 0.5]
        assert recall.tolist() == [0.5, 0.5]

    def test_no_detections_gives_empty_curve(self):
        precision, recall = compute_pr_curve([[]], [[_gt_box(0)]])
        assert precision.size == 0 and recall.size == 0

    def test_average_precision_against_definition(self, rng):
        for case in range(50):
            n = int(rng.integers(1, 9))
            flags = [bool(rng.integers(0, 2)) for _ in range(n)]
            n_gt = sum(flags) + int(rng.integers(0, 3))
            if n_gt == 0:
                n_gt = 1
            dets, gts = _case(flags, n_gt)
            got = compute_map(dets, gts)
            want = _ap_by_definition(flags, n_gt)
            assert abs(got - want) <= 1e-9, f"case {case}: {got} vs {want}"


class TestAggregation:
    def test_mean_and_sample_std(self):
        assert aggregate_runs([1.0, 2.0, 3.0]) == (2.0, 1.0)

    def test_single_run_has_zero_std(self):
        assert aggregate_runs([5.0]) == (5.0, 0.0)

    def test_constant_runs(self):
        assert aggregate_runs([2.0, 2.0, 2.0, 2.0]) == (2.0, 0.0)

    def test_translation_moves_only_the_mean(self):
        mean_a, std_a = aggregate_runs([10.0, 12.0, 14.0])
        mean_b, std_b = aggregate_runs([110.0, 112.0, 114.0])
        assert mean_b == mean_a + 100.0
        assert std_b == pytest.approx(std_a)

    def test_empty_rejected(self):
        with pytest.raises(EmptyList):
            aggregate_runs([])


class TestEvalReport:
    def test_cell_format(self):
        report = EvalReport((29.24, 0.76), (88.08, 0.12), (17.10, 0.11))
        assert report.cell("f_score") == "29.24±0.76"
        assert report.cell("accuracy") == "88.08±0.12"
        assert report.cell("map") == "17.10±0.11"

    def test_bounds_enforced(self):
        with pytest.raises(OutOfRange):
            EvalReport((101.0, 0.0), (50.0, 0.0), (50.0, 0.0))
        with pytest.raises(OutOfRange):
            EvalReport((50.0, -0.1), (50.0, 0.0), (50.0, 0.0))
        with pytest.raises(OutOfRange):
            EvalReport((50.0, 0.0), (-1.0, 0.0), (50.0, 0.0))


class TestRowKey:
    def test_all_off_is_baseline_for_either_scale(self):
        flags = (False, False, False)
        assert row_key("multi", flags) == ("baseline", flags)
        assert row_key("single", flags) == ("baseline", flags)

    def test_active_flags_keep_scale(self):
        assert row_key("single", (True, False, True)) == ("single", (True, False, True))


def _baseline_report():
    return EvalReport((29.24, 0.76), (88.08, 0.12), (17.10, 0.11), n_runs=3)


class TestAblationReport:
    def test_baseline_required(self):
        with pytest.raises(MissingBaseline):
            ablation_report({row_key("multi", (True, True, True)): _baseline_report()})

    def test_baseline_only_table(self):
        table = ablation_report(
            {row_key("multi", (False, False, False)): _baseline_report()}
        )
        assert len(table.rows) == 1
        assert table.rows[0][0] == "Baseline"

    def test_full_grid_in_fixed_order(self):
        results = {
            row_key(scale, flags): _baseline_report()
            for _, scale, flags in ROW_ORDER
        }
        table = ablation_report(results)
        assert [(label, flags) for label, _, flags, _ in table.rows] == [
            (label, flags) for label, _, flags in ROW_ORDER
        ]
        assert len(table.rows) == 9

    def test_runs_aggregate_into_cells(self):
        runs = [
            {"f_score": 50.0, "accuracy": 60.0, "map": 70.0},
            {"f_score": 52.0, "accuracy": 62.0, "map": 72.0},
        ]
        table = ablation_report({row_key("multi", (False, False, False)): runs})
        report = table.rows[0][3]
        assert report.n_runs == 2
        assert report.cell("f_score") == "51.00±1.41"
        assert report.cell("accuracy") == "61.00±1.41"

    def test_text_rendering_marks_and_cells(self):
        results = {
            row_key("multi", (False, False, False)): _baseline_report(),
            row_key("multi", (True, True, True)): EvalReport(
                (45.00, 1.00), (90.00, 0.50), (30.00, 0.25), n_runs=3,
                group_conv=True, a2_attn=True, at_attn=True,
            ),
        }
        text = ablation_report(results).to_text()
        assert "29.24±0.76" in text
        assert "88.08±0.12" in text
        assert "17.10±0.11" in text
        assert "✓" in text and "✗" in text
        assert text.splitlines()[0].startswith("config")

    def test_csv_rendering(self):
        table = ablation_report(
            {row_key("multi", (False, False, False)): _baseline_report()}
        )
        lines = table.to_csv_text().splitlines()
        assert lines[0] == "config,group_conv,a2_attn,at_attn,f_score,accuracy,map,n_runs"
        assert lines[1] == "Baseline,no,no,no,29.24±0.76,88.08±0.12,17.10±0.11,3"

    def test_write_files(self, tmp_path):
        table = ablation_report(
            {row_key("multi", (False, False, False)): _baseline_report()}
        )
        csv_path, txt_path = write_ablation_report(table, str(tmp_path))
        assert os.path.basename(csv_path) == "ablation_report.csv"
        assert os.path.basename(txt_path) == "ablation_report.txt"
        assert "Baseline" in open(csv_path).read()
        assert "Baseline" in open(txt_path).read()


def test_evaluate_model_returns_fraction_metrics(tiny_dataset):
    from tbattr.model import TbAttrModel

    torch.manual_seed(0)
    model = TbAttrModel(Config())
    manifest = load_manifest(os.path.join(tiny_dataset, "manifest.jsonl"))
    metrics = evaluate_model(model, manifest.records_in("val"), tiny_dataset)
    assert set(metrics) == {"accuracy", "f1", "map"}
    for name in ("accuracy", "f1", "map"):
        assert 0.0 <= metrics[name] <= 1.0
