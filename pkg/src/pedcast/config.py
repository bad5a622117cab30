"""Run configuration: one flat document of dotted keys, every key defaulted.

Precedence is defaults < JSON file < explicit overrides. Unknown keys and
values of the wrong type are rejected.
"""
from __future__ import annotations

import json

DEFAULTS: dict = {
    "seed": 0,
    "sim.preset": "smoke",
    "grid.range": 40.0,
    "grid.pillar_size": 0.3125,
    "grid.max_points_per_pillar": 32,
    "grid.max_pillars": 16384,
    "pillar.channels": 16,
    "frames.input": 6,
    "frames.groups": 3,
    "frames.dt": 0.2,
    "frames.future": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
    "backbone.c0": 32,
    "backbone.c1": 64,
    "backbone.c2": 128,
    "backbone.channel_divisor": 4,
    "backbone.kernel": 3,
    "backbone.nonlinearity": "relu",
    "trpn.hidden": 64,
    "trpn.anchor_w": 0.9,
    "trpn.anchor_l": 0.9,
    "trpn.anchor_headings": [0.0],
    "trpn.normalizer": "position_norm",
    "trpn.pre_nms_top_k": 512,
    "trpn.post_nms_top_k": 64,
    "trpn.nms_iou": 0.5,
    "assign.th_pos": 0.5,
    "assign.th_neg": 0.35,
    "loss.cls": 1.0,
    "loss.cur_reg": 1.0,
    "loss.past_reg": 1.0,
    "loss2.cls": 1.0,
    "loss2.cur_reg": 1.0,
    "loss2.future_reg": 1.0,
    "sti.crop_size": 5,
    "sti.local_channels": 96,
    "sti.path_hidden": 32,
    "sti.phi_dim": 32,
    "sti.alpha_hidden": 32,
    "sti.interaction_dim": 64,
    "sti.head_hidden": 64,
    "sti.use_history_path": True,
    "sti.use_interaction": True,
    "sti.interaction_radius": 0.0,
    "sti.normalizer": "diagonal",
    "train.lr": 1e-3,
    "train.steps": 2500,
    "train.lr_decay_at": 0.8,
    "train.lr_decay": 0.1,
    "train.checkpoint_every": 500,
    "train.post_nms_top_k": 32,
    "train.anchor_samples": 256,
    "train.pos_fraction": 0.5,
    "train.gt_proposals": 8,
    "train.gt_jitter": 0.15,
    "infer.nms_iou": 0.5,
    "infer.max_detections": 64,
    "infer.score_thresh": 0.0,
    "eval.iou": 0.5,
    "eval.bin_size": 2.5,
}


class ConfigError(ValueError):
    pass


def _coerce(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key} expects an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key} expects a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key} expects a string, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) for v in value):
            return [float(v) for v in value]
        raise ConfigError(f"{key} expects a list of numbers, got {value!r}")
    raise ConfigError(f"unsupported default type for {key}")


class RunConfig:
    """Immutable view of a validated key/value document."""

    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value, DEFAULTS[key])
        self._values = merged

    def __getitem__(self, key):
        v = self._values[key]
        return list(v) if isinstance(v, list) else v

    def as_dict(self) -> dict:
        return {k: self[k] for k in self._values}

    def updated(self, overrides: dict) -> "RunConfig":
        vals = {k: v for k, v in self._values.items() if v != DEFAULTS[k]}
        vals.update(overrides)
        return RunConfig(vals)

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def __repr__(self):
        changed = {k: v for k, v in self._values.items() if v != DEFAULTS[k]}
        return f"RunConfig({changed})"


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    if path:
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a JSON object of dotted keys")
        values.update(doc)
    values.update(overrides or {})
    return RunConfig(values)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a JSON value, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
