"""Metrics, multi-seed aggregation, and the ablation report table.

Accuracy is element-wise multi-label accuracy over attribute cells at
threshold 0.5 (ties predict positive); the F-score is macro-averaged over
attributes with the 0/0 -> 0 convention; detection quality is single-class
average precision with all-point interpolation.  Reported cells are
percentages rendered as mean±std over seeds.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import EmptyList, MissingBaseline, OutOfRange, ShapeError

METRICS = ("f_score", "accuracy", "map")

# Fixed table shape: label, scale mode, (group_conv, a2_attn, at_attn).
ROW_ORDER = (
    ("Baseline", "multi", (False, False, False)),
    ("SingleScale", "single", (False, True, True)),
    ("SingleScale", "single", (True, False, True)),
    ("SingleScale", "single", (True, True, False)),
    ("SingleScale", "single", (True, True, True)),
    ("MultiScale", "multi", (False, True, True)),
    ("MultiScale", "multi", (True, False, True)),
    ("MultiScale", "multi", (True, True, False)),
    ("MultiScale", "multi", (True, True, True)),
)


def row_key(scale_mode, flags):
    """Canonical results key; the all-off row is the baseline regardless of
    scale mode."""
    flags = tuple(bool(f) for f in flags)
    if not any(flags):
        return ("baseline", flags)
    return (scale_mode, flags)


def _as_array(values):
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def _check_pair(probabilities, labels):
    p = _as_array(probabilities)
    y = _as_array(labels)
    if p.shape != y.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {y.shape}")
    if p.ndim != 2:
        raise ShapeError(f"expected (samples, attributes), got {p.shape}")
    return p, y


def compute_accuracy(probabilities, labels, threshold=0.5):
    """Fraction of attribute cells predicted correctly after thresholding."""
    p, y = _check_pair(probabilities, labels)
    if p.size == 0:
        raise EmptyList("no attribute cells to score")
    return float(((p >= threshold) == (y >= 0.5)).mean())


def compute_f_score(probabilities, labels, threshold=0.5):
    """Macro F1 over attributes; precision/recall/F1 use the 0/0 -> 0 rule."""
    p, y = _check_pair(probabilities, labels)
    if p.size == 0:
        raise EmptyList("no attribute cells to score")
    pred = p >= threshold
    true = y >= 0.5
    scores = []
    for col in range(p.shape[1]):
        tp = float(np.sum(pred[:, col] & true[:, col]))
        n_pred = float(pred[:, col].sum())
        n_true = float(true[:, col].sum())
        precision = tp / n_pred if n_pred > 0 else 0.0
        recall = tp / n_true if n_true > 0 else 0.0
        if precision + recall == 0:
            scores.append(0.0)
        else:
            scores.append(2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def _box_array(box):
    if hasattr(box, "as_list"):
        return box.as_list()
    return [float(v) for v in box]


def _det_fields(det):
    if hasattr(det, "box"):
        return _box_array(det.box), float(det.score)
    return _box_array(det[:4]), float(det[4])


def _pair_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def match_detections(detections, gts, iou_thr=0.5):
    """Rank all detections by score and greedily match each to the best
    still-unmatched gt of its image at IoU >= iou_thr.

    Returns (tp flags in rank order, total gt count).
    """
    if len(detections) != len(gts):
        raise ShapeError("detections and gts must have one entry per image")
    ranked = []
    for img, dets in enumerate(detections):
        for j, det in enumerate(dets):
            box, score = _det_fields(det)
            ranked.append((-score, img, j, box))
    ranked.sort(key=lambda item: item[:3])
    gt_boxes = [[_box_array(g) for g in per_image] for per_image in gts]
    taken = [[False] * len(per_image) for per_image in gt_boxes]
    flags = []
    for _, img, _, box in ranked:
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gt_boxes[img]):
            if taken[img][g]:
                continue
            value = _pair_iou(box, gt)
            if value > best_iou:
                best, best_iou = g, value
        if best >= 0 and best_iou >= iou_thr:
            taken[img][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, sum(len(per_image) for per_image in gt_boxes)


def compute_pr_curve(detections, gts, iou_thr=0.5):
    """Precision and recall arrays over the ranked detection list."""
    flags, n_gt = match_detections(detections, gts, iou_thr)
    if n_gt == 0 or not flags:
        return np.zeros(0), np.zeros(0)
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    return tp / ranks, tp / n_gt


def compute_map(detections, gts, iou_thr=0.5):
    """Single-class average precision, all-point interpolation."""
    precision, recall = compute_pr_curve(detections, gts, iou_thr)
    if recall.size == 0:
        return 0.0
    # Precision envelope: best precision at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def aggregate_runs(values):
    """Mean and sample standard deviation (ddof 1; zero for one value)."""
    if len(values) == 0:
        raise EmptyList("no runs to aggregate")
    arr = np.asarray(list(values), dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class EvalReport:
    """One table row: percent (mean, std) per metric plus the run count."""

    f_score: tuple
    accuracy: tuple
    map: tuple
    n_runs: int = 1
    group_conv: bool = False
    a2_attn: bool = False
    at_attn: bool = False
    scale_mode: str = "multi"

    def __post_init__(self):
        for name in METRICS:
            mean, std = getattr(self, name)
            if std < 0:
                raise OutOfRange(f"{name} std {std} < 0")
            if not 0.0 <= mean <= 100.0:
                raise OutOfRange(f"{name} mean {mean} outside [0, 100]")

    def cell(self, name):
        mean, std = getattr(self, name)
        return f"{mean:.2f}±{std:.2f}"


def _build_report(value, scale_mode, flags):
    if isinstance(value, EvalReport):
        return value
    runs = list(value)
    if not runs:
        raise EmptyList("configuration has no runs")
    stats = {name: aggregate_runs([run[name] for run in runs]) for name in METRICS}
    return EvalReport(
        stats["f_score"],
        stats["accuracy"],
        stats["map"],
        n_runs=len(runs),
        group_conv=flags[0],
        a2_attn=flags[1],
        at_attn=flags[2],
        scale_mode=scale_mode,
    )


@dataclass
class ReportTable:
    rows: list  # (label, scale_mode, flags, EvalReport)

    def to_csv_text(self):
        lines = ["config,group_conv,a2_attn,at_attn,f_score,accuracy,map,n_runs"]
        for label, _, flags, report in self.rows:
            marks = ["yes" if f else "no" for f in flags]
            cells = [report.cell(name) for name in METRICS]
            lines.append(",".join([label, *marks, *cells, str(report.n_runs)]))
        return "\n".join(lines) + "\n"

    def to_text(self):
        header = ["config", "group_conv", "a2_attn", "at_attn", *METRICS]
        body = []
        for label, _, flags, report in self.rows:
            marks = ["✓" if f else "✗" for f in flags]
            body.append([label, *marks, *(report.cell(name) for name in METRICS)])
        widths = [
            max(len(row[i]) for row in [header, *body]) for i in range(len(header))
        ]
        render = lambda row: "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        return "\n".join([render(header), rule, *(render(row) for row in body)]) + "\n"


def ablation_report(results):
    """Assemble the fixed-shape component table from per-configuration runs.

    `results` maps row_key(scale_mode, flags) to either a list of per-run
    {f_score, accuracy, map} percent dicts or a prebuilt EvalReport.  The
    baseline row is mandatory; other rows appear when present, in fixed
    order.
    """
    if row_key("multi", (False, False, False)) not in results:
        raise MissingBaseline("results lack the all-components-off baseline row")
    rows = []
    for label, scale_mode, flags in ROW_ORDER:
        key = row_key(scale_mode, flags)
        if key not in results:
            continue
        rows.append(
            (label, scale_mode, flags, _build_report(results[key], scale_mode, flags))
        )
    return ReportTable(rows)


def write_ablation_report(table, out_dir):
    """Emit ablation_report.csv and ablation_report.txt; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "ablation_report.csv")
    txt_path = os.path.join(out_dir, "ablation_report.txt")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(table.to_csv_text())
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(table.to_text())
    return csv_path, txt_path


def evaluate_model(model, records, root, batch_size=8, iou_thr=0.5):
    """Attribute accuracy/F1 and detection AP for a list of records.

    Attribute metrics use records carrying attribute vectors; AP uses every
    record (images without boxes contribute only false positives).  Values
    are fractions in [0, 1].
    """
    from .training import make_batch  # local import to avoid a cycle

    model.eval()
    probs_rows, label_rows = [], []
    detections, gts = [], []
    n_attr = model.n_attributes
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            batch = make_batch(chunk, root, n_attr)
            out = model(batch.images)
            dets = model.detector.detect(out.pyramid)
            for i, record in enumerate(chunk):
                if record.has_attributes:
                    probs_rows.append(out.attribute_probs[i].tolist())
                    label_rows.append(record.attributes)
                detections.append(dets[i])
                gts.append(record.boxes or [])
    metrics = {"accuracy": math.nan, "f1": math.nan, "map": math.nan}
    if probs_rows:
        metrics["accuracy"] = compute_accuracy(probs_rows, label_rows)
        metrics["f1"] = compute_f_score(probs_rows, label_rows)
    if detections:
        metrics["map"] = compute_map(detections, gts, iou_thr)
    return metrics
