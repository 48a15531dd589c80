"""Model and training configuration, with JSON round-trips and presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Backbone geometry. JSON field names match the attribute names here."""

    D: int
    encoder_layers: int
    decoder_layers: int
    heads: int
    feed_forward_width: int
    patch_size: int
    image_size: tuple[int, int]
    V: int
    relative_bias_buckets: int
    relative_bias_max_distance: int

    channels: int = 3  # fixed, not serialized

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.D % self.heads != 0:
            raise ConfigError(f"hidden size {self.D} not divisible by {self.heads} heads")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        for name in ("D", "encoder_layers", "decoder_layers", "heads", "feed_forward_width",
                     "patch_size", "V", "relative_bias_buckets", "relative_bias_max_distance"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def patches_per_image(self) -> int:
        h, w = self.image_size
        return (h // self.patch_size) * (w // self.patch_size)

    _JSON_FIELDS = ("D", "encoder_layers", "decoder_layers", "heads", "feed_forward_width",
                    "patch_size", "image_size", "V", "relative_bias_buckets",
                    "relative_bias_max_distance")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self._JSON_FIELDS}
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls._JSON_FIELDS)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        missing = set(cls._JSON_FIELDS) - set(d)
        if missing:
            raise ConfigError(f"missing model config fields: {sorted(missing)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


PRESETS = {
    # full-size geometry, used for shape arithmetic only
    "paper-base": ModelConfig(
        D=768, encoder_layers=12, decoder_layers=12, heads=12, feed_forward_width=2048,
        patch_size=16, image_size=(224, 224), V=32128,
        relative_bias_buckets=32, relative_bias_max_distance=128,
    ),
    "toy": ModelConfig(
        D=64, encoder_layers=2, decoder_layers=2, heads=4, feed_forward_width=128,
        patch_size=8, image_size=(24, 24), V=512,
        relative_bias_buckets=32, relative_bias_max_distance=128,
    ),
}


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return ModelConfig(**{k: getattr(cfg, k) for k in ModelConfig._JSON_FIELDS})


@dataclass
class TrainingConfig:
    """Pre-training loop knobs. JSON uses the exact key "lambda"."""

    lambda_: float = 1.0
    batch_size: int = 32
    lr: float = 5e-4
    phase1_steps: int = 2000
    phase2_steps: int = 1000
    ratios: dict[str, float] = field(default_factory=lambda: {"cap-clean": 1.0, "qa-text": 1.0, "qa-image": 1.0})
    seed: int = 0
    topk: int = 4

    def __post_init__(self):
        if self.batch_size < 1 or self.topk < 1:
            raise ConfigError("batch_size and topk must be positive")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("phase step counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


@dataclass
class StagePlan:
    """One fine-tuning stage: which loss regime, for how long."""

    stage: str  # "in-batch" | "fixed-retrieval"
    steps: int
    k: int = 4
    beam_width: int = 2
    lambda_: float = 1.0
    lr: float = 3e-4
    batch_size: int = 32

    def __post_init__(self):
        if self.stage not in ("in-batch", "fixed-retrieval"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.k < 1 or self.steps < 1:
            raise ConfigError("stage needs k >= 1 and steps >= 1")
