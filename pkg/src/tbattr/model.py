"""End-to-end model: backbone, pyramid, attribute branch, fusion, detector.

Raw stage features feed per-level attribute extractors whose maps are first
mixed among themselves (attribute-attribute attention), pooled into the
multi-label attribute classifier, and finally used to refine the detection
pyramid (attribute-TB attention).  Each fusion stage and the grouped
extractor can be switched off independently; `scale_mode` decides whether
fusion runs on every pyramid level or on level 5 only.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attention import AttrAttrAttention, AttrTbAttention, downsample_schedule
from .attribute import (
    AttributeBlock,
    AttributeClassifier,
    AttributeProjection,
    fuse_attribute_scales,
)
from .backbone import STAGE_LEVELS, Backbone, FeaturePyramid, FeaturePyramidNetwork
from .config import Config
from .detector import DetectorConfig, TwoStageDetector
from .errors import ConfigError


@dataclass
class ModelOutputs:
    attribute_probs: torch.Tensor  # (B, N_a)
    pyramid: FeaturePyramid  # detector-ready, refined when at_attn is on
    attribute_maps: dict  # level -> list of N_a (B, C_a, H, W) maps


def detector_config(cfg):
    return DetectorConfig(
        anchor_base_scale=cfg.get("anchor.base_scale"),
        anchor_scales=tuple(cfg.float_list("anchor.scales")),
        anchor_aspects=tuple(cfg.float_list("anchor.aspects")),
        rpn_pos_iou=cfg.get("rpn.pos_iou"),
        rpn_neg_iou=cfg.get("rpn.neg_iou"),
        rpn_nms_iou=cfg.get("rpn.nms_iou"),
        rpn_topk=cfg.get("rpn.topk"),
        rpn_sample_size=cfg.get("rpn.sample_size"),
        rpn_pos_fraction=cfg.get("rpn.pos_fraction"),
        roi_pos_iou=cfg.get("roi.pos_iou"),
        roi_sample_size=cfg.get("roi.sample_size"),
        roi_pos_fraction=cfg.get("roi.pos_fraction"),
        roi_output_size=cfg.get("roi.output_size"),
        score_thr=cfg.get("detect.score_thr"),
        det_nms_iou=cfg.get("detect.nms_iou"),
        max_per_image=cfg.get("detect.max_per_image"),
    )


class TbAttrModel(nn.Module):
    """Joint attribute classification and lesion detection network."""

    def __init__(self, config=None):
        super().__init__()
        if config is None:
            config = Config()
        elif isinstance(config, dict):
            config = Config(config)
        self.config = config

        self.n_attributes = config.get("attr.n_attributes")
        self.channels_per_attribute = config.get("attr.channels_per_attribute")
        self.use_group_conv = config.get("ablation.group_conv")
        self.use_a2_attn = config.get("ablation.a2_attn")
        self.use_at_attn = config.get("ablation.at_attn")
        self.scale_mode = config.get("scale_mode")
        if self.scale_mode not in ("single", "multi"):
            raise ConfigError(f"scale_mode must be single or multi, got {self.scale_mode!r}")
        self.active_levels = (5,) if self.scale_mode == "single" else STAGE_LEVELS

        head_dim = config.get("attn.head_dim")
        downsample_base = config.get("attn.downsample_base")
        kernel_size = config.get("attr.kernel_size")

        self.backbone = Backbone(
            config.get("backbone.preset"), config.get("backbone.base_channels")
        )
        self.fpn = FeaturePyramidNetwork(
            self.backbone.out_channels, config.get("fpn.channels")
        )

        def per_level(make):
            return nn.ModuleDict({str(lvl): make(lvl) for lvl in self.active_levels})

        if self.use_group_conv:
            self.attribute_blocks = per_level(
                lambda lvl: AttributeBlock(
                    self.backbone.out_channels[lvl],
                    self.n_attributes,
                    self.channels_per_attribute,
                    kernel_size,
                )
            )
        else:
            self.attribute_blocks = per_level(
                lambda lvl: AttributeProjection(
                    self.backbone.out_channels[lvl],
                    self.n_attributes,
                    self.channels_per_attribute,
                )
            )

        if self.use_a2_attn:
            self.a2_attn = per_level(
                lambda lvl: AttrAttrAttention(
                    self.n_attributes,
                    self.channels_per_attribute,
                    head_dim=head_dim,
                    downsample=downsample_schedule(downsample_base, lvl),
                )
            )

        if self.use_at_attn:
            self.at_attn = per_level(
                lambda lvl: AttrTbAttention(
                    self.channels_per_attribute,
                    config.get("fpn.channels"),
                    proj_dim=config.get("atattn.proj_dim"),
                    head_dim=head_dim,
                    downsample=downsample_schedule(downsample_base, lvl),
                    normalize_weights=config.get("atattn.normalize_weights"),
                )
            )

        self.classifier = AttributeClassifier(
            len(self.active_levels) * self.n_attributes * self.channels_per_attribute,
            self.n_attributes,
        )
        self.detector = TwoStageDetector(
            config.get("fpn.channels"), detector_config(config)
        )

    def forward(self, images) -> ModelOutputs:
        stages = self.backbone(images)
        pyramid = self.fpn(stages)

        attribute_maps = {}
        for level in self.active_levels:
            maps = self.attribute_blocks[str(level)](stages[level])
            if self.use_a2_attn:
                maps = self.a2_attn[str(level)](maps)
            attribute_maps[level] = maps

        fused = fuse_attribute_scales(attribute_maps, self.active_levels)
        probs = self.classifier(fused)

        if self.use_at_attn:
            refined = {
                level: self.at_attn[str(level)](attribute_maps[level], feature)
                if level in attribute_maps
                else feature
                for level, feature in pyramid.items()
            }
            pyramid = FeaturePyramid(refined)
        return ModelOutputs(probs, pyramid, attribute_maps)

    def detect(self, images):
        """Per-image detections from the (refined) pyramid."""
        return self.detector.detect(self.forward(images).pyramid)


def build_model(config=None) -> TbAttrModel:
    return TbAttrModel(config)


def save_checkpoint(model, path):
    """Weights plus the resolved configuration that produced them."""
    torch.save(
        {"model_state": model.state_dict(), "config": model.config.resolved()}, path
    )


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = TbAttrModel(Config(payload["config"]))
    model.load_state_dict(payload["model_state"])
    return model
