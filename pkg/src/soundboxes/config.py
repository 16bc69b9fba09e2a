"""Run configuration: nested dataclasses serialised as YAML."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .audio import StftConfig
from .dataset import SceneConfig
from .errors import ConfigError
from .proposals import ProposalConfig
from .separator import SeparatorConfig


@dataclass
class AudioSection:
    sample_rate: int = 11025
    clip_samples: int = 66150
    n_fft: int = 1022
    hop: int = 256
    window: str = "hann"


@dataclass
class ModelSection:
    n_train_boxes: int = 10
    n_infer_boxes: int = 80
    feature_dim: int = 32
    hidden: int = 128
    head: str = "softmax"
    temperature: float = 1.0
    overlap_eps: float = 0.0
    crop_size: int = 224
    encoder_channels: list = field(default_factory=lambda: [64, 128, 256, 512])
    net_shape: list = field(default_factory=lambda: [256, 256])
    unet_depth: int = 7
    unet_base: int = 32
    unet_max_channels: int = 512
    unet_upsample: str = "bilinear"
    unet_feature_norm: str = "batch"


@dataclass
class TrainSection:
    optimizer: str = "adam"
    lr: float = 1e-3
    selector_lr: float = 1e-3
    lr_final_ratio: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 1500
    log_every: int = 50
    cross_category_pairs: bool = True


@dataclass
class DataSection:
    source: str = "synthetic"
    root: str = ""
    n_categories: int = 7
    n_train: int = 2000
    n_val: int = 400
    n_val_pairs: int = 200
    image_size: int = 64
    glyph_min: int = 17
    glyph_max: int = 21
    proposal_min_size: int = 16
    split_seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    audio: AudioSection = field(default_factory=AudioSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        m = self.model
        if m.n_train_boxes < 2 or m.n_infer_boxes < 2:
            raise ConfigError("N and M must both be >= 2")
        if m.feature_dim < 1 or m.hidden < 1:
            raise ConfigError("feature and hidden sizes must be positive")
        if m.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.train.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.train.optimizer!r}")
        if self.data.source not in ("synthetic", "real"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        self.stft_config()
        self.separator_config()

    def stft_config(self) -> StftConfig:
        return StftConfig(self.audio.n_fft, self.audio.hop, self.audio.window)

    def separator_config(self) -> SeparatorConfig:
        m = self.model
        return SeparatorConfig(head=m.head, depth=m.unet_depth, base_channels=m.unet_base,
                               max_channels=m.unet_max_channels, feature_dim=m.feature_dim,
                               input_shape=tuple(m.net_shape), upsample=m.unet_upsample,
                               feature_norm=m.unet_feature_norm)

    def scene_config(self) -> SceneConfig:
        d = self.data
        return SceneConfig(n_categories=d.n_categories, image_size=d.image_size,
                           glyph_sizes=(d.glyph_min, d.glyph_max),
                           sample_rate=self.audio.sample_rate, clip_samples=self.audio.clip_samples)

    def proposal_config(self) -> ProposalConfig:
        return ProposalConfig(min_size=self.data.proposal_min_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw or {})
        sections = {"audio": AudioSection, "model": ModelSection, "train": TrainSection, "data": DataSection}
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                sec = sections[key]
                names = {f.name for f in dataclasses.fields(sec)}
                unknown = set(value or {}) - names
                if unknown:
                    raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
                kwargs[key] = sec(**(value or {}))
            elif key == "seed":
                kwargs[key] = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted overrides, e.g. ``replace(**{"model.head": "sigmoid"})``."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            node = d
            for p in parts[:-1]:
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def desk_config(**overrides) -> RunConfig:
    """Small preset that trains on a single CPU core in a few minutes."""
    cfg = RunConfig(
        audio=AudioSection(sample_rate=11025, clip_samples=3968, n_fft=254, hop=128),
        model=ModelSection(crop_size=32, encoder_channels=[16, 32, 64, 64], net_shape=[128, 32],
                           unet_depth=5, unet_base=8, unet_max_channels=64, unet_upsample="nearest"),
        train=TrainSection(batch_size=16, steps=1000, selector_lr=1e-4),
    )
    return cfg.replace(**overrides) if overrides else cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    profile = (raw or {}).pop("profile", "full")
    if profile == "desk":
        base = desk_config().to_dict()
    elif profile == "full":
        base = RunConfig().to_dict()
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    for key, value in (raw or {}).items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key].update(value)
        else:
            base[key] = value
    return RunConfig.from_dict(base)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
