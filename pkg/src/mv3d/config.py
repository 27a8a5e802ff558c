"""Run configuration: dataclasses, validation, JSON loading, presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .matching import DEFAULT_LAMBDAS
from .predictor import DISTILL_LAMBDAS
from .scene import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: int = 16
    heads: int = 4
    head_dim: int = 24
    enc_depth: int = 2
    ffn_ratio: int = 4
    rope_scale: float = 10.0
    token_stride: int = 1
    num_probes: int = 32
    dec_layers: int = 3
    def_heads: int = 4
    def_points: int = 4
    alpha: float = 0.1
    tau_view_init: float = 1.0
    pred_blocks: int = 2
    pos_freqs: int = 8
    mask_ratio: float = 0.5
    mask_block: int = 4
    neighbors: int = 5
    route_tau: float = 1.0
    conf_threshold: float = 0.3
    ee_freqs: int = 4


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 1e-3
    batch: int = 4
    clip_norm: float = 0.5
    weight_decay: float = 0.0
    warmup_steps: int = 0
    lr_schedule: str = "fixed"        # fixed | cosine
    lr_floor: float = 0.0
    ema_momentum: float = 0.999
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    distill_lambdas: dict = field(default_factory=lambda: dict(DISTILL_LAMBDAS))


@dataclass
class RunConfig:
    seed: int = 0
    num_scenes: int = 8
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        m, s, t = self.model, self.scene, self.train
        try:
            s.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        checks = [
            (m.head_dim % 6 == 0, f"model.head_dim={m.head_dim} must be divisible by 6"),
            (s.feat_hw % 32 == 0, f"scene.feat_hw={s.feat_hw} must be divisible by 32"),
            (m.token_stride in (1, 2, 4, 8),
             f"model.token_stride={m.token_stride} must be 1, 2, 4 or 8"),
            (s.feat_hw % max(m.token_stride, 1) == 0,
             "model.token_stride must divide scene.feat_hw"),
            (0.0 < m.mask_ratio < 1.0,
             f"model.mask_ratio={m.mask_ratio} outside (0, 1)"),
            (m.channels == s.c_channels,
             f"model.channels={m.channels} != scene.c_channels={s.c_channels}"),
            (m.alpha > 0, f"model.alpha={m.alpha} must be positive"),
            (m.num_probes >= 1, "model.num_probes must be at least 1"),
            (m.dec_layers >= 0, "model.dec_layers must be non-negative"),
            (1 <= m.neighbors, "model.neighbors must be at least 1"),
            (0.0 <= t.ema_momentum <= 1.0,
             f"train.ema_momentum={t.ema_momentum} outside [0, 1]"),
            (t.steps >= 1, "train.steps must be at least 1"),
            (t.batch >= 1, "train.batch must be at least 1"),
            (t.clip_norm > 0, "train.clip_norm must be positive"),
            (all(v >= 0 for v in t.lambdas.values()),
             "train.lambdas must be non-negative"),
            (all(v >= 0 for v in t.distill_lambdas.values()),
             "train.distill_lambdas must be non-negative"),
            (t.lr_schedule in ("fixed", "cosine"),
             f"train.lr_schedule='{t.lr_schedule}' unknown"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        missing = set(DEFAULT_LAMBDAS) - set(t.lambdas)
        if missing:
            raise ConfigError(f"train.lambdas missing keys {sorted(missing)}")
        return self


def _from_dict(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} under '{path}'")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if isinstance(value, dict) and ftype in ("SceneSpec", "ModelConfig", "TrainConfig"):
            sub = {"SceneSpec": SceneSpec, "ModelConfig": ModelConfig,
                   "TrainConfig": TrainConfig}[ftype]
            kwargs[name] = _from_dict(sub, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """Build and validate a RunConfig, rejecting unknown keys."""
    return _from_dict(RunConfig, data, "config").validate()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at char {e.pos}") from None
    return config_from_dict(data)


def toy_preset() -> RunConfig:
    """Desk-scale training preset: converges on CPU in a couple of minutes.

    Feature maps stay at the default 64x64 (so object masks clear the
    visibility threshold) while the memory tokenizes at stride 4, giving
    16x16 tokens per view and pyramid levels 8x8 / 4x4 / 2x2.
    """
    cfg = RunConfig()
    cfg.scene = SceneSpec(num_objects=2, num_views=2, feat_hw=64)
    cfg.model = ModelConfig(token_stride=4)
    cfg.train = TrainConfig(steps=300, lr=2e-3, batch=2, warmup_steps=20,
                            lr_schedule="cosine", lr_floor=2e-4)
    return cfg.validate()


def paper_schedule_preset() -> RunConfig:
    """Full-scale optimization schedule kept as a named reference preset:
    warmup to a small peak rate with cosine decay, large batch, weight decay.
    Not the default; it targets cluster-scale training."""
    cfg = RunConfig()
    cfg.train = TrainConfig(
        steps=5000, lr=3e-6, batch=64, clip_norm=0.5, weight_decay=1e-4,
        warmup_steps=1200, lr_schedule="cosine", lr_floor=1e-8,
    )
    return cfg.validate()
