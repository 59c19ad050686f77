"""Flat dotted-key configuration.

Precedence is defaults < config file < command-line overrides.  The file
format is one `key = value` pair per line; blank lines and `#` comments are
ignored.  A few keys default to None and are filled in from the backbone
preset after merging (see PRESET_DEFAULTS).
"""

from __future__ import annotations

import json
import os

from .errors import ConfigError, MissingFile

DEFAULTS = {
    "backbone.preset": "tiny",  # tiny | resnet50_like
    "backbone.base_channels": None,
    "fpn.channels": None,
    "attr.n_attributes": 7,
    "attr.channels_per_attribute": None,
    "attr.kernel_size": 3,
    "attn.head_dim": None,
    "attn.downsample_base": 16,
    "atattn.normalize_weights": False,
    "atattn.proj_dim": 16,
    "anchor.base_scale": 4.0,
    "anchor.scales": "1,2",
    "anchor.aspects": "1.0,2.0,0.5",
    "rpn.pos_iou": 0.7,
    "rpn.neg_iou": 0.3,
    "rpn.nms_iou": 0.7,
    "rpn.topk": 256,
    "rpn.sample_size": 64,
    "rpn.pos_fraction": 0.5,
    "roi.pos_iou": 0.5,
    "roi.sample_size": 64,
    "roi.pos_fraction": 0.25,
    "roi.output_size": 7,
    "detect.score_thr": 0.05,
    "detect.nms_iou": 0.5,
    "detect.max_per_image": 100,
    "train.epochs": 60,
    "train.batch_size": 8,
    "train.initial_lr": 1e-3,
    "train.lr_decay_every": 20,
    "train.lr_decay_factor": 10.0,
    "train.weight_decay": 1e-4,
    "train.seed": 0,
    "train.lambda": 1.0,
    "train.eval_every": 1,
    "train.threads": 0,
    "ablation.group_conv": True,
    "ablation.a2_attn": True,
    "ablation.at_attn": True,
    "scale_mode": "multi",  # single | multi
}

# Keys whose default depends on the backbone preset.
PRESET_DEFAULTS = {
    "tiny": {
        "backbone.base_channels": 8,
        "fpn.channels": 64,
        "attr.channels_per_attribute": 8,
        "attn.head_dim": 8,
    },
    "resnet50_like": {
        "backbone.base_channels": 64,
        "fpn.channels": 256,
        "attr.channels_per_attribute": 32,
        "attn.head_dim": 32,
    },
}


def _coerce(key, value):
    """Coerce a parsed value to the type of the key's default."""
    default = DEFAULTS[key]
    if isinstance(value, str):
        text = value.strip()
        try:
            value = json.loads(text)
        except (json.JSONDecodeError, ValueError):
            value = text
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if value in (0, 1):
            return bool(value)
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, (int, float)):
            return int(value)
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


class Config:
    """Immutable-ish view over a flat key/value mapping with defaults."""

    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        self._values[key] = _coerce(key, value)

    def get(self, key):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        value = self._values[key]
        if value is None:
            preset = self._values["backbone.preset"]
            try:
                return PRESET_DEFAULTS[preset][key]
            except KeyError:
                raise ConfigError(f"unknown backbone preset: {preset}") from None
        return value

    def __getitem__(self, key):
        return self.get(key)

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise MissingFile(f"config file not found: {path}")
        cfg = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                cfg.set(key.strip(), value.strip())
        return cfg

    def apply_overrides(self, overrides):
        """Apply `key=value` strings (last one wins)."""
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value: {item!r}")
            key, value = item.split("=", 1)
            self.set(key.strip(), value.strip())
        return self

    def resolved(self):
        """Return a plain dict with preset-dependent keys filled in."""
        return {key: self.get(key) for key in DEFAULTS}

    def to_text(self):
        lines = [f"{key} = {json.dumps(value)}" for key, value in sorted(self.resolved().items())]
        return "\n".join(lines) + "\n"

    def int_list(self, key):
        return [int(float(tok)) for tok in str(self.get(key)).split(",") if tok.strip()]

    def float_list(self, key):
        return [float(tok) for tok in str(self.get(key)).split(",") if tok.strip()]
