"""Two-stage detection head over a feature pyramid.

Stage one is a shared RPN (3x3 conv, per-anchor objectness and box deltas)
run on every pyramid level; stage two resamples proposal features with
bilinear RoI alignment and applies affine classification/regression heads.
Box convention throughout: corner [x_min, y_min, x_max, y_max], continuous
pixels, end-exclusive.  One foreground category ("tb").
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import BoundingBox
from .errors import DegenerateBox, ShapeError


@dataclass
class Anchor:
    cx: float
    cy: float
    width: float
    height: float
    level: int

    def as_box(self):
        return BoundingBox(
            self.cx - self.width / 2,
            self.cy - self.height / 2,
            self.cx + self.width / 2,
            self.cy + self.height / 2,
        )


@dataclass
class Proposal:
    box: BoundingBox
    objectness: float


@dataclass
class Detection:
    box: BoundingBox
    category: str = "tb"
    score: float = 0.0


def write_detections(path, detections_by_image):
    """Line-delimited JSON: {image_path, boxes: [[x1, y1, x2, y2, score]]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_path, detections in detections_by_image.items():
            boxes = [d.box.as_list() + [d.score] for d in detections]
            fh.write(json.dumps({"image_path": image_path, "boxes": boxes}) + "\n")


def _corners(box):
    if isinstance(box, BoundingBox):
        return box.x_min, box.y_min, box.x_max, box.y_max
    return tuple(float(v) for v in box)


def iou(a, b):
    """Intersection over union of two corner boxes; 0 when disjoint."""
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def iou_matrix(a, b):
    """Pairwise IoU between (N, 4) and (M, 4) corner-box tensors."""
    if a.numel() == 0 or b.numel() == 0:
        return a.new_zeros((a.shape[0], b.shape[0]))
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_deltas(anchors, boxes):
    """Box regression targets (dx, dy, dw, dh) with log-space sizes."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gcx = boxes[:, 0] + gw / 2
    gcy = boxes[:, 1] + gh / 2
    return torch.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, torch.log(gw / aw), torch.log(gh / ah)],
        dim=1,
    )


def decode_deltas(anchors, deltas):
    """Inverse of encode_deltas; zero deltas reproduce the anchors exactly."""
    w = anchors[:, 2] - anchors[:, 0]
    h = anchors[:, 3] - anchors[:, 1]
    shift_x = deltas[:, 0] * w
    shift_y = deltas[:, 1] * h
    half_dw = (w * torch.exp(deltas[:, 2]) - w) / 2
    half_dh = (h * torch.exp(deltas[:, 3]) - h) / 2
    return torch.stack(
        [
            anchors[:, 0] + shift_x - half_dw,
            anchors[:, 1] + shift_y - half_dh,
            anchors[:, 2] + shift_x + half_dw,
            anchors[:, 3] + shift_y + half_dh,
        ],
        dim=1,
    )


def clip_boxes(boxes, height, width):
    x = boxes[:, (0, 2)].clamp(0.0, float(width))
    y = boxes[:, (1, 3)].clamp(0.0, float(height))
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def smooth_l1(residual, beta=1.0):
    """Elementwise smooth L1: quadratic inside |r| < beta, linear outside."""
    abs_r = residual.abs()
    return torch.where(abs_r < beta, 0.5 * residual**2 / beta, abs_r - 0.5 * beta)


def assign_anchors(anchors, gts, pos_thr=0.7, neg_thr=0.3):
    """Label anchors 1 (positive), 0 (negative), -1 (ignore) against gts.

    IoU >= pos_thr is positive, <= neg_thr negative, in between ignore; the
    highest-IoU anchor of every gt is positive regardless.  Returns (labels,
    matched gt index); with no gts every anchor is negative.
    """
    n = anchors.shape[0]
    labels = torch.full((n,), 0, dtype=torch.long)
    matched = torch.zeros(n, dtype=torch.long)
    if gts is None or gts.shape[0] == 0:
        return labels, matched
    ious = iou_matrix(anchors, gts)
    max_iou, matched = ious.max(dim=1)
    labels = torch.full((n,), -1, dtype=torch.long)
    labels[max_iou <= neg_thr] = 0
    labels[max_iou >= pos_thr] = 1
    for j in range(gts.shape[0]):
        best = ious[:, j] == ious[:, j].max()
        labels[best] = 1
        matched[best] = j
    return labels, matched


def nms_indices(boxes, scores, iou_thr, max_keep=None):
    """Greedy descending-score suppression; ties keep the lower index."""
    boxes_t = torch.as_tensor(boxes, dtype=torch.float64).reshape(-1, 4)
    scores_t = torch.as_tensor(scores, dtype=torch.float64).reshape(-1)
    n = boxes_t.shape[0]
    if n == 0:
        return []
    order = torch.argsort(-scores_t, stable=True)
    pairwise = iou_matrix(boxes_t[order], boxes_t[order])
    alive = torch.ones(n, dtype=torch.bool)
    keep = []
    for rank in range(n):
        if not bool(alive[rank]):
            continue
        keep.append(int(order[rank]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        alive &= pairwise[rank] <= iou_thr
    return keep


def nms_filter(detections, iou_thr=0.5):
    """Apply greedy NMS to a list of Detection values."""
    boxes = [d.box.as_list() for d in detections]
    scores = [d.score for d in detections]
    return [detections[i] for i in nms_indices(boxes, scores, iou_thr)]


def generate_level_anchors(height, width, stride, base_scale=4.0, scales=(1.0, 2.0), aspects=(1.0, 2.0, 0.5)):
    """Corner-box anchors for one level, cell-major with anchors contiguous.

    Each anchor has area (stride * base_scale * scale)^2 at aspect = h/w,
    centered on its cell.
    """
    shapes = []
    for scale in scales:
        size = stride * base_scale * scale
        for aspect in aspects:
            root = math.sqrt(aspect)
            shapes.append((size / root, size * root))
    shapes = torch.tensor(shapes, dtype=torch.float64)
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) * stride
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    centers = torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=1)
    cxy = centers[:, None, :].expand(-1, shapes.shape[0], -1).reshape(-1, 2)
    wh = shapes[None, :, :].expand(centers.shape[0], -1, -1).reshape(-1, 2)
    return torch.cat([cxy - wh / 2, cxy + wh / 2], dim=1)


def assign_roi_levels(boxes, levels, canonical_level=4, canonical_size=224.0):
    """Standard pyramid level assignment by box scale, clamped to `levels`."""
    areas = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-6) * (
        boxes[:, 3] - boxes[:, 1]
    ).clamp(min=1e-6)
    target = torch.floor(canonical_level + torch.log2(torch.sqrt(areas) / canonical_size))
    return target.clamp(min(levels), max(levels)).long()


def roi_align_single(feature, boxes, stride, output_size):
    """Bilinear RoI alignment on one (C, H, W) map, one sample per cell.

    Sample points sit at output-cell centers in image pixels; feature cell
    (i, j) carries the value at pixel center ((j+.5)*stride, (i+.5)*stride).
    Returns (K, C, S, S).
    """
    c, h, w = feature.shape
    k = boxes.shape[0]
    s = output_size
    if k == 0:
        return feature.new_zeros((0, c, s, s))
    steps = (torch.arange(s, dtype=feature.dtype, device=feature.device) + 0.5) / s
    bw = (boxes[:, 2] - boxes[:, 0])[:, None]
    bh = (boxes[:, 3] - boxes[:, 1])[:, None]
    px = boxes[:, 0][:, None] + steps[None, :] * bw  # (K, S)
    py = boxes[:, 1][:, None] + steps[None, :] * bh
    fx = (px / stride - 0.5).clamp(0, w - 1)
    fy = (py / stride - 0.5).clamp(0, h - 1)
    x0 = fx.floor().clamp(max=w - 2) if w > 1 else fx.floor().clamp(max=0)
    y0 = fy.floor().clamp(max=h - 2) if h > 1 else fy.floor().clamp(max=0)
    tx = (fx - x0).clamp(0, 1)
    ty = (fy - y0).clamp(0, 1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    # Expand to the (K, S, S) sample grid: y varies along rows, x along cols.
    y0g, x0g = y0[:, :, None].expand(k, s, s), x0[:, None, :].expand(k, s, s)
    y1g, x1g = y1[:, :, None].expand(k, s, s), x1[:, None, :].expand(k, s, s)
    tyg, txg = ty[:, :, None].expand(k, s, s), tx[:, None, :].expand(k, s, s)
    gather = lambda yi, xi: feature[:, yi.reshape(-1), xi.reshape(-1)].reshape(c, k, s, s)
    top = gather(y0g, x0g) * (1 - txg) + gather(y0g, x1g) * txg
    bottom = gather(y1g, x0g) * (1 - txg) + gather(y1g, x1g) * txg
    return (top * (1 - tyg) + bottom * tyg).permute(1, 0, 2, 3)


def roi_extract(pyramid, box, output_size=7, canonical_level=4, canonical_size=224.0):
    """Fixed-size feature patch for one box, level chosen by box scale."""
    x0, y0, x1, y1 = _corners(box)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegenerateBox(f"box {(x0, y0, x1, y1)} has no area")
    levels = [lvl for lvl, _ in pyramid.items()]
    feature = pyramid[levels[0]]
    boxes = feature.new_tensor([[x0, y0, x1, y1]])
    level = int(assign_roi_levels(boxes, levels, canonical_level, canonical_size)[0])
    feature = pyramid[level]
    if feature.dim() == 4:
        feature = feature[0]
    return roi_align_single(feature, boxes.to(feature.dtype), 2**level, output_size)[0]


class RpnHead(nn.Module):
    """Shared 3x3 conv trunk with 1x1 objectness and box-delta branches."""

    def __init__(self, in_channels, n_anchors):
        super().__init__()
        self.n_anchors = n_anchors
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.obj = nn.Conv2d(in_channels, n_anchors, 1)
        self.reg = nn.Conv2d(in_channels, 4 * n_anchors, 1)

    def forward(self, level_map):
        """Return per-anchor (objectness logits (B, N), box deltas (B, N, 4))
        in the anchor generator's cell-major order."""
        b, _, h, w = level_map.shape
        trunk = F.relu(self.conv(level_map))
        obj = self.obj(trunk).permute(0, 2, 3, 1).reshape(b, -1)
        reg = (
            self.reg(trunk)
            .reshape(b, self.n_anchors, 4, h, w)
            .permute(0, 3, 4, 1, 2)
            .reshape(b, -1, 4)
        )
        return obj, reg


class RoIHead(nn.Module):
    """Affine classification and regression heads over flattened patches."""

    def __init__(self, in_channels, output_size=7):
        super().__init__()
        features = in_channels * output_size * output_size
        self.cls = nn.Linear(features, 2)
        self.reg = nn.Linear(features, 4)

    def forward(self, patches):
        flat = patches.flatten(1)
        if flat.shape[1] != self.cls.in_features:
            raise ShapeError(
                f"patch features {flat.shape[1]} != expected {self.cls.in_features}"
            )
        return self.cls(flat), self.reg(flat)

    def predict(self, patches):
        """Class probabilities (softmax over background/tb) and deltas."""
        logits, deltas = self.forward(patches)
        return torch.softmax(logits, dim=-1), deltas


def detection_loss(
    rpn_obj_logits,
    rpn_box_deltas,
    anchor_labels,
    anchor_box_targets,
    roi_cls_logits,
    roi_labels,
    roi_box_deltas,
    roi_box_targets,
    beta=1.0,
):
    """Faster-R-CNN-style loss: both stages' cross-entropy plus smooth L1.

    Labels follow assign_anchors' {1, 0, -1} convention; -1 entries are
    excluded everywhere, regression runs over positives only, and empty
    selections contribute exact zeros.
    """
    zero = rpn_obj_logits.sum() * 0 + roi_cls_logits.sum() * 0
    total = zero
    keep = anchor_labels >= 0
    if bool(keep.any()):
        total = total + F.binary_cross_entropy_with_logits(
            rpn_obj_logits[keep], anchor_labels[keep].to(rpn_obj_logits.dtype)
        )
    pos = anchor_labels == 1
    if bool(pos.any()):
        total = total + smooth_l1(rpn_box_deltas[pos] - anchor_box_targets[pos], beta).mean()
    keep = roi_labels >= 0
    if bool(keep.any()):
        total = total + F.cross_entropy(roi_cls_logits[keep], roi_labels[keep])
    pos = roi_labels == 1
    if bool(pos.any()):
        total = total + smooth_l1(roi_box_deltas[pos] - roi_box_targets[pos], beta).mean()
    return total


@dataclass
class DetectorConfig:
    anchor_base_scale: float = 4.0
    anchor_scales: tuple = (1.0, 2.0)
    anchor_aspects: tuple = (1.0, 2.0, 0.5)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_nms_iou: float = 0.7
    rpn_topk: int = 256
    rpn_sample_size: int = 64
    rpn_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5
    roi_sample_size: int = 64
    roi_pos_fraction: float = 0.25
    roi_output_size: int = 7
    score_thr: float = 0.05
    det_nms_iou: float = 0.5
    max_per_image: int = 100
    add_gt_proposals: bool = True
    levels: tuple = (2, 3, 4, 5)


class TwoStageDetector(nn.Module):
    """RPN plus RoI heads over a merged feature pyramid."""

    def __init__(self, in_channels, cfg: DetectorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        n_anchors = len(self.cfg.anchor_scales) * len(self.cfg.anchor_aspects)
        self.rpn = RpnHead(in_channels, n_anchors)
        self.roi_head = RoIHead(in_channels, self.cfg.roi_output_size)
        self._anchor_cache = {}

    # -- anchors ------------------------------------------------------------

    def level_anchors(self, level, height, width):
        key = (level, height, width)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_level_anchors(
                height,
                width,
                2**level,
                self.cfg.anchor_base_scale,
                self.cfg.anchor_scales,
                self.cfg.anchor_aspects,
            )
        return self._anchor_cache[key]

    def _flat_predictions(self, pyramid):
        """Run the RPN on every level; concat anchors and predictions."""
        objs, regs, anchors = [], [], []
        for level, feature in pyramid.items():
            if level not in self.cfg.levels:
                continue
            obj, reg = self.rpn(feature)
            objs.append(obj)
            regs.append(reg)
            anchors.append(
                self.level_anchors(level, *feature.shape[-2:]).to(feature.dtype)
            )
        return torch.cat(objs, dim=1), torch.cat(regs, dim=1), torch.cat(anchors, dim=0)

    def _image_extent(self, pyramid):
        level, feature = next(iter(pyramid.items()))
        return feature.shape[-2] * 2**level, feature.shape[-1] * 2**level

    # -- proposals ----------------------------------------------------------

    def _proposal_boxes(self, obj_logits, box_deltas, anchors, extent):
        scores = torch.sigmoid(obj_logits.detach())
        boxes = decode_deltas(anchors, box_deltas.detach())
        boxes = clip_boxes(boxes, *extent)
        wide = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        boxes, scores = boxes[wide], scores[wide]
        if boxes.shape[0] == 0:
            return boxes, scores
        order = torch.argsort(scores, descending=True, stable=True)[:1024]
        boxes, scores = boxes[order], scores[order]
        keep = nms_indices(boxes, scores, self.cfg.rpn_nms_iou, self.cfg.rpn_topk)
        return boxes[keep], scores[keep]

    @torch.no_grad()
    def propose(self, pyramid):
        """Top-k proposals after NMS, one list of Proposal per image."""
        obj, reg, anchors = self._flat_predictions(pyramid)
        extent = self._image_extent(pyramid)
        out = []
        for b in range(obj.shape[0]):
            boxes, scores = self._proposal_boxes(obj[b], reg[b], anchors, extent)
            out.append(
                [
                    Proposal(BoundingBox(*bx), float(sc))
                    for bx, sc in zip(boxes.tolist(), scores.tolist())
                ]
            )
        return out

    # -- roi feature extraction ----------------------------------------------

    def _roi_features(self, pyramid, image_index, boxes):
        levels = [lvl for lvl, _ in pyramid.items() if lvl in self.cfg.levels]
        assignment = assign_roi_levels(boxes, levels)
        patches = boxes.new_zeros(
            (
                boxes.shape[0],
                pyramid[levels[0]].shape[1],
                self.cfg.roi_output_size,
                self.cfg.roi_output_size,
            )
        )
        for level in levels:
            sel = assignment == level
            if not bool(sel.any()):
                continue
            feature = pyramid[level][image_index]
            patches[sel] = roi_align_single(
                feature, boxes[sel], 2**level, self.cfg.roi_output_size
            )
        return patches

    # -- training -----------------------------------------------------------

    def _subsample(self, labels, sample_size, pos_fraction, rng):
        """Mark unsampled anchors as ignore; keep <= sample_size, capped pos."""
        pos_idx = torch.nonzero(labels == 1, as_tuple=False).flatten()
        neg_idx = torch.nonzero(labels == 0, as_tuple=False).flatten()
        n_pos = min(len(pos_idx), int(sample_size * pos_fraction))
        n_neg = min(len(neg_idx), sample_size - n_pos)

        def pick(idx, count):
            if count >= len(idx):
                return idx
            if rng is None:
                return idx[:count]
            sel = rng.permutation(len(idx))[:count]
            return idx[torch.as_tensor(sel, dtype=torch.long)]

        sampled = torch.full_like(labels, -1)
        kept_pos = pick(pos_idx, n_pos)
        kept_neg = pick(neg_idx, n_neg)
        sampled[kept_pos] = 1
        sampled[kept_neg] = 0
        return sampled

    def training_losses(self, pyramid, gt_boxes, rng=None, proposals=None):
        """Detection loss for a batch; `gt_boxes` is one (M, 4) tensor (M may
        be 0) per image.  `proposals` optionally overrides RPN proposals."""
        obj, reg, anchors = self._flat_predictions(pyramid)
        extent = self._image_extent(pyramid)
        total = obj.sum() * 0
        for b, gts in enumerate(gt_boxes):
            gts = gts.to(obj.dtype)
            labels, matched = assign_anchors(
                anchors, gts, self.cfg.rpn_pos_iou, self.cfg.rpn_neg_iou
            )
            labels = self._subsample(
                labels, self.cfg.rpn_sample_size, self.cfg.rpn_pos_fraction, rng
            )
            anchor_targets = torch.zeros_like(reg[b])
            pos = labels == 1
            if bool(pos.any()):
                anchor_targets[pos] = encode_deltas(anchors[pos], gts[matched[pos]])

            if proposals is not None:
                prop_boxes = proposals[b].to(obj.dtype)
            else:
                prop_boxes, _ = self._proposal_boxes(obj[b], reg[b], anchors, extent)
            if self.cfg.add_gt_proposals and gts.shape[0] > 0:
                prop_boxes = torch.cat([prop_boxes, gts], dim=0)
            if prop_boxes.shape[0] == 0:
                prop_boxes = anchors.new_tensor([[0.0, 0.0, float(extent[1]), float(extent[0])]])
            roi_labels, roi_matched = assign_anchors(
                prop_boxes, gts, self.cfg.roi_pos_iou, self.cfg.roi_pos_iou
            )
            if gts.shape[0] == 0:
                roi_labels = torch.zeros(prop_boxes.shape[0], dtype=torch.long)
            roi_labels[(roi_labels == -1)] = 0  # single threshold: not pos => neg
            roi_labels = self._subsample(
                roi_labels, self.cfg.roi_sample_size, self.cfg.roi_pos_fraction, rng
            )
            keep = roi_labels >= 0
            rois = prop_boxes[keep].detach()
            kept_labels = roi_labels[keep]
            kept_matched = roi_matched[keep]
            patches = self._roi_features(pyramid, b, rois)
            cls_logits, box_deltas = self.roi_head(patches)
            roi_targets = torch.zeros_like(box_deltas)
            pos = kept_labels == 1
            if bool(pos.any()):
                roi_targets[pos] = encode_deltas(rois[pos], gts[kept_matched[pos]])
            total = total + detection_loss(
                obj[b],
                reg[b],
                labels,
                anchor_targets,
                cls_logits,
                kept_labels,
                box_deltas,
                roi_targets,
            )
        return total / max(1, len(gt_boxes))

    # -- inference ----------------------------------------------------------

    @torch.no_grad()
    def detect(self, pyramid):
        """Final per-image detections after score threshold and NMS."""
        obj, reg, anchors = self._flat_predictions(pyramid)
        extent = self._image_extent(pyramid)
        results = []
        for b in range(obj.shape[0]):
            prop_boxes, _ = self._proposal_boxes(obj[b], reg[b], anchors, extent)
            if prop_boxes.shape[0] == 0:
                results.append([])
                continue
            patches = self._roi_features(pyramid, b, prop_boxes)
            probs, deltas = self.roi_head.predict(patches)
            boxes = clip_boxes(decode_deltas(prop_boxes, deltas), *extent)
            scores = probs[:, 1]
            valid = (
                (scores >= self.cfg.score_thr)
                & (boxes[:, 2] > boxes[:, 0])
                & (boxes[:, 3] > boxes[:, 1])
            )
            boxes, scores = boxes[valid], scores[valid]
            keep = nms_indices(
                boxes, scores, self.cfg.det_nms_iou, self.cfg.max_per_image
            )
            results.append(
                [
                    Detection(BoundingBox(*boxes[i].tolist()), "tb", float(scores[i]))
                    for i in keep
                ]
            )
        return results
