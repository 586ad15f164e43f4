"""Training configuration: nested dataclasses with YAML round-tripping.

Keys mirror the dotted names used on the command line and in config files,
e.g. ``quality.b``, ``loss.m``, ``contrastive.include_positive_in_denominator``.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .errors import ConfigurationError


@dataclass
class QualityConfig:
    momentum: float = 0.01
    c: float = 0.33
    b: float = 0.2
    # False trains every feature with the classifier and no pair is contrastive
    enabled: bool = True


@dataclass
class LossConfig:
    m: float = 0.4
    s: float = 64.0
    reduction: str = "masked"


@dataclass
class ContrastiveConfig:
    s: float = 64.0
    include_positive_in_denominator: bool = False
    enabled: bool = True
    # "masked": mean over routed pairs; "batch": routed-pair sum / batch size
    reduction: str = "batch"


@dataclass
class QueueConfig:
    capacity: int = None  # None -> identity count


@dataclass
class EncoderConfig:
    arch: str = "tiny-cnn"
    embedding_dim: int = 64
    widths: tuple = (16, 32, 64, 128)
    output_bn: bool = True


@dataclass
class AugmentSection:
    # False keeps only the (flipped) original stream, as in the plain baseline
    enabled: bool = True
    p_per_transform: float = 0.5
    scale_range: tuple = (0.25, 1.0)
    min_crop_area: float = 0.8
    max_rotation_deg: float = 30.0
    color_jitter_strength: float = 0.2
    jpeg_quality_range: tuple = (30, 90)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 12
    lr_drop_epochs: tuple = (6, 9)
    seed: int = 0
    image_size: tuple = (112, 112)
    deterministic: bool = True
    quality: QualityConfig = field(default_factory=QualityConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    queue: QueueConfig = field(default_factory=QueueConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)

    def __post_init__(self):
        for name, cls in _SECTIONS.items():
            value = getattr(self, name)
            if isinstance(value, dict):
                fields = {f.name for f in dataclasses.fields(cls)}
                bad = set(value) - fields
                if bad:
                    raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
                setattr(self, name, cls(**value))
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (batch norm needs two samples)")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConfigurationError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and self.epochs and drops[-1] >= self.epochs:
            raise ConfigurationError(f"lr_drop_epochs {drops} must all be < epochs={self.epochs}")
        if not 0.0 <= self.quality.b <= 1.0:
            raise ConfigurationError(f"quality.b must lie in [0, 1], got {self.quality.b}")

    def augment_config(self):
        a = self.augment
        return AugmentConfig(
            p_per_transform=a.p_per_transform,
            scale_range=a.scale_range,
            min_crop_area=a.min_crop_area,
            max_rotation_deg=a.max_rotation_deg,
            color_jitter_strength=a.color_jitter_strength,
            jpeg_quality_range=a.jpeg_quality_range,
            input_size=self.image_size,
            seed=self.seed,
        )

    def lr_at(self, epoch):
        """Step-decay schedule: divide by 10 once per passed drop epoch (0-based)."""
        return self.lr * 0.1 ** sum(epoch >= d for d in self.lr_drop_epochs)

    def to_dict(self):
        def plain(v):
            if isinstance(v, tuple):
                return list(v)
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v

        return plain(dataclasses.asdict(self))

    def replace(self, **dotted):
        """Copy with overrides given as ``{"quality.b": 0.0}`` style keys."""
        data = self.to_dict()
        for key, value in dotted.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigurationError(f"unknown config key {key!r}")
            node[leaf] = value
        return from_dict(data)


_SECTIONS = {
    "quality": QualityConfig,
    "loss": LossConfig,
    "contrastive": ContrastiveConfig,
    "queue": QueueConfig,
    "encoder": EncoderConfig,
    "augment": AugmentSection,
}


def from_dict(data):
    data = dict(data or {})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            fields = {f.name for f in dataclasses.fields(cls)}
            bad = set(value or {}) - fields
            if bad:
                raise ConfigurationError(f"unknown keys in [{key}]: {sorted(bad)}")
            kwargs[key] = cls(**(value or {}))
        else:
            kwargs[key] = value
    return TrainConfig(**kwargs)


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return from_dict(yaml.safe_load(path.read_text()))


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def baseline(config):
    """Classification-only analogue: flip-only data, no partition, no contrastive."""
    return config.replace(**{"augment.enabled": False, "quality.enabled": False,
                             "contrastive.enabled": False})
