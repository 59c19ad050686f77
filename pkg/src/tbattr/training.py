"""Joint training over mixed supervision.

Every record carries the images; attribute labels and boxes may each be
absent.  The attribute branch trains on records with attribute vectors, the
detector on records that either have boxes or are known lesion-free, and
the two losses combine as loss_det + lambda * loss_cls.  Batches are dealt
so each one touches both branches whenever the split allows it.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .attribute import attribute_bce_loss
from .backbone import FeaturePyramid
from .data import load_image, load_manifest
from .errors import EmptyBatch, OutOfRange
from .evaluation import evaluate_model
from .model import TbAttrModel, save_checkpoint

LOG_HEADER = ("epoch", "loss_det", "loss_cls", "total", "val_acc", "val_f1", "val_map")


@dataclass
class AblationFlags:
    """Switches for the three studied components plus the fusion scale."""

    group_conv: bool = True
    a2_attn: bool = True
    at_attn: bool = True
    scale_mode: str = "multi"

    def as_overrides(self):
        return {
            "ablation.group_conv": self.group_conv,
            "ablation.a2_attn": self.a2_attn,
            "ablation.at_attn": self.at_attn,
            "scale_mode": self.scale_mode,
        }


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    initial_lr: float = 1e-3
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    weight_decay: float = 1e-4
    seed: int = 0
    lambda_cls: float = 1.0
    eval_every: int = 1
    threads: int = 0

    @classmethod
    def from_config(cls, cfg):
        return cls(
            epochs=cfg.get("train.epochs"),
            batch_size=cfg.get("train.batch_size"),
            initial_lr=cfg.get("train.initial_lr"),
            lr_decay_every=cfg.get("train.lr_decay_every"),
            lr_decay_factor=cfg.get("train.lr_decay_factor"),
            weight_decay=cfg.get("train.weight_decay"),
            seed=cfg.get("train.seed"),
            lambda_cls=cfg.get("train.lambda"),
            eval_every=cfg.get("train.eval_every"),
            threads=cfg.get("train.threads"),
        )


@dataclass
class LossBreakdown:
    loss_det: object
    loss_cls: object
    lambda_cls: float
    total: object

    def floats(self):
        return tuple(
            float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            for v in (self.loss_det, self.loss_cls, self.total)
        )


def joint_loss(loss_det, loss_cls, lambda_cls=1.0):
    """Combine branch losses; the detection term enters unweighted."""
    return LossBreakdown(loss_det, loss_cls, lambda_cls, loss_det + lambda_cls * loss_cls)


def lr_at_epoch(initial_lr, epoch, total_epochs, decay_every=20, decay_factor=10.0):
    """Step-decayed learning rate; epoch must lie in [0, total_epochs)."""
    if epoch < 0 or epoch >= total_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {total_epochs})")
    return initial_lr / decay_factor ** (epoch // decay_every)


@dataclass
class Batch:
    images: torch.Tensor  # (B, 1, H, W)
    attribute_labels: torch.Tensor  # (B, N_a), zeros where absent
    attribute_mask: torch.Tensor  # (B,) 1.0 where labels present
    gt_boxes: list  # per-sample (M, 4) tensors, M may be 0
    det_indices: list  # rows contributing to the detection loss

    def __len__(self):
        return self.images.shape[0]


def make_batch(records, root, n_attributes):
    """Stack one batch of records into tensors; images must share a size."""
    if not records:
        raise EmptyBatch("batch has no records")
    images, labels, mask, gt_boxes, det_indices = [], [], [], [], []
    for i, record in enumerate(records):
        images.append(load_image(os.path.join(root, record.image_path)))
        if record.has_attributes:
            labels.append(record.attributes)
            mask.append(1.0)
        else:
            labels.append([0] * n_attributes)
            mask.append(0.0)
        boxes = record.boxes or []
        gt_boxes.append(torch.tensor([b.as_list() for b in boxes], dtype=torch.float32).reshape(-1, 4))
        if record.det_supervised:
            det_indices.append(i)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise EmptyBatch(f"images in one batch must share a size, got {shapes}")
    return Batch(
        torch.from_numpy(np.stack(images)).unsqueeze(1),
        torch.tensor(labels, dtype=torch.float32),
        torch.tensor(mask, dtype=torch.float32),
        gt_boxes,
        det_indices,
    )


def stratified_batches(records, batch_size, rng):
    """Index batches seeded with one detection and one attribute sample each
    (best effort), remaining slots filled from a shuffled pool."""
    n = len(records)
    order = [int(i) for i in rng.permutation(n)]
    if batch_size < 2 or n <= batch_size:
        return [order[i : i + batch_size] for i in range(0, n, batch_size)]
    det = [i for i in order if records[i].det_supervised]
    attr = [i for i in order if records[i].has_attributes]
    n_batches = math.ceil(n / batch_size)
    batches = [[] for _ in range(n_batches)]
    used = set()

    def seed_from(pool):
        pool_set = set(pool)
        for b in range(n_batches):
            if any(i in pool_set for i in batches[b]):
                continue
            pick = next((i for i in pool if i not in used), None)
            if pick is None:
                return
            batches[b].append(pick)
            used.add(pick)

    seed_from(det)
    seed_from(attr)
    rest = [i for i in order if i not in used]
    for b in range(n_batches):
        while len(batches[b]) < batch_size and rest:
            batches[b].append(rest.pop(0))
    return [b for b in batches if b]


def train_step(model, optimizer, batch, lambda_cls=1.0, rng=None):
    """One optimizer step over a batch; returns the loss breakdown."""
    model.train()
    optimizer.zero_grad()
    out = model(batch.images)
    loss_cls = attribute_bce_loss(
        out.attribute_probs, batch.attribute_labels, batch.attribute_mask
    )
    if batch.det_indices:
        idx = torch.tensor(batch.det_indices, dtype=torch.long)
        sub = FeaturePyramid({lvl: t[idx] for lvl, t in out.pyramid.items()})
        loss_det = model.detector.training_losses(
            sub, [batch.gt_boxes[i] for i in batch.det_indices], rng
        )
    else:
        loss_det = out.attribute_probs.sum() * 0
    breakdown = joint_loss(loss_det, loss_cls, lambda_cls)
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def build_optimizer(model, train_cfg):
    return torch.optim.AdamW(
        model.parameters(),
        lr=train_cfg.initial_lr,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=train_cfg.weight_decay,
    )


def run_training(data_dir, out_dir, config, log_fn=None):
    """Train on `data_dir`'s manifest, writing log.csv and checkpoint.pt.

    Returns the last logged row as a dict (val metrics from the most recent
    evaluation epoch).
    """
    train_cfg = TrainConfig.from_config(config)
    if train_cfg.threads > 0:
        torch.set_num_threads(train_cfg.threads)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)

    manifest = load_manifest(os.path.join(data_dir, "manifest.jsonl"))
    train_records = manifest.records_in("train")
    val_records = manifest.records_in("val")

    model = TbAttrModel(config)
    optimizer = build_optimizer(model, train_cfg)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "log.csv")
    checkpoint_path = os.path.join(out_dir, "checkpoint.pt")
    last = {}
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for epoch in range(train_cfg.epochs):
            lr = lr_at_epoch(
                train_cfg.initial_lr,
                epoch,
                train_cfg.epochs,
                train_cfg.lr_decay_every,
                train_cfg.lr_decay_factor,
            )
            for group in optimizer.param_groups:
                group["lr"] = lr
            sums = np.zeros(3)
            batches = stratified_batches(train_records, train_cfg.batch_size, rng)
            for index_batch in batches:
                batch = make_batch(
                    [train_records[i] for i in index_batch],
                    data_dir,
                    manifest.n_attributes,
                )
                breakdown = train_step(
                    model, optimizer, batch, train_cfg.lambda_cls, rng
                )
                sums += np.array(breakdown.floats())
            means = sums / max(1, len(batches))
            row = {
                "epoch": epoch,
                "loss_det": means[0],
                "loss_cls": means[1],
                "total": means[2],
                "val_acc": "",
                "val_f1": "",
                "val_map": "",
            }
            if train_cfg.eval_every > 0 and (
                (epoch + 1) % train_cfg.eval_every == 0
                or epoch == train_cfg.epochs - 1
            ):
                metrics = evaluate_model(model, val_records, data_dir)
                row["val_acc"] = metrics["accuracy"]
                row["val_f1"] = metrics["f1"]
                row["val_map"] = metrics["map"]
            writer.writerow([row[key] for key in LOG_HEADER])
            fh.flush()
            last = dict(row)
            if log_fn is not None:
                log_fn(
                    f"epoch {epoch}: total {means[2]:.4f} "
                    f"(det {means[0]:.4f}, cls {means[1]:.4f})"
                )
    save_checkpoint(model, checkpoint_path)
    last["log"] = log_path
    last["checkpoint"] = checkpoint_path
    return last
