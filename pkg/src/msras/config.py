"""Run configuration: recipe presets, YAML round-trip and fingerprints."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .losses import scaled_windows
from .model import ConfigError, TcdConfig
from .robustness import AugmentationConfig
from .separation import DEFAULT_STEMS
from .training import DEFAULT_CURRICULUM, CurriculumStep, TrainConfig, ablate_curriculum, scale_curriculum

TOY_SAMPLE_RATE = 8000
TOY_ITERATION_SCALE = 0.2
# lambda1 multipliers for (MDS, MDSR); tuned so the toy step-5 model stays above 20 dB SNR
TOY_CARRIER_SCALE = (1.0, 100.0)

TOY_MODEL = dict(
    h=32,
    base_channels=64,
    decoder_channels=[4, 8, 16, 32, 64, 64],
    concealer_upsample_factors=[4, 4, 4, 4],
    decoder_pool_factors=[4, 4, 2, 2, 2, 2],
    carrier_stft_window=256,
    residual=True,
    embedding_std=4.0,
)


@dataclass
class DataConfig:
    source: str = "toy"
    path: Optional[str] = None
    train_clips: int = 32
    test_clips: int = 8
    seed: int = 0
    duration: float = 3.0
    stems: Tuple[str, ...] = DEFAULT_STEMS

    def __post_init__(self):
        self.stems = tuple(self.stems)
        if self.source not in ("toy", "directory"):
            raise ConfigError(f"data.source must be 'toy' or 'directory', got {self.source!r}")
        if self.source == "directory" and not self.path:
            raise ConfigError("data.path is required for a directory dataset")
        if self.train_clips < 1 or self.test_clips < 1:
            raise ConfigError("clip counts must be positive")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: Tuple[CurriculumStep, ...] = DEFAULT_CURRICULUM
    data: DataConfig = field(default_factory=DataConfig)
    separator: str = "oracle"
    separator_window: int = 2048
    seed: int = 0
    distortions: Tuple[str, ...] = ()

    def __post_init__(self):
        self.curriculum = tuple(self.curriculum)
        self.distortions = tuple(self.distortions)

    def to_dict(self) -> dict:
        return {
            "train": self.train.to_dict(),
            "curriculum": [asdict(s) for s in self.curriculum],
            "data": {**asdict(self.data), "stems": list(self.data.stems)},
            "separator": self.separator,
            "separator_window": self.separator_window,
            "seed": self.seed,
            "distortions": list(self.distortions),
        }


def toy_recipe() -> RunConfig:
    """Desk-scale defaults: 8 kHz toy stems, F=256, schedule scaled by 0.2."""
    train = TrainConfig(model=TcdConfig(**TOY_MODEL), sample_rate=TOY_SAMPLE_RATE,
                        windows=scaled_windows(TOY_SAMPLE_RATE), crop_frames=16,
                        carrier_scale=TOY_CARRIER_SCALE)
    return RunConfig(train=train, curriculum=scale_curriculum(DEFAULT_CURRICULUM, TOY_ITERATION_SCALE),
                     separator_window=512)


def full_recipe() -> RunConfig:
    return RunConfig(data=DataConfig(source="directory", path="musdb18"))


RECIPES = {"toy": toy_recipe, "full": full_recipe}


def _build(cls, values: dict, base):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return replace(base, **values) if base is not None else cls(**values)


def _train_from_dict(values: dict, base: TrainConfig) -> TrainConfig:
    values = dict(values)
    if "model" in values:
        values["model"] = TcdConfig(**{**base.model.to_dict(), **values["model"]})
    if "augmentation" in values and values["augmentation"] is not None:
        aug = base.augmentation.to_dict() if base.augmentation is not None else {}
        merged = {**aug, **values["augmentation"]}
        if "lowpass_cutoff_hz" in merged:
            merged["lowpass_cutoff_hz"] = tuple(merged["lowpass_cutoff_hz"])
        values["augmentation"] = AugmentationConfig(**merged)
    for key in ("windows", "betas", "embedded_stems", "carrier_scale"):
        if key in values:
            values[key] = tuple(values[key])
    return _build(TrainConfig, values, base)


def config_from_dict(values: dict) -> RunConfig:
    """Overlay ``values`` on a recipe (``recipe: toy|full``, default toy).

    ``curriculum`` may be an explicit list of steps; ``curriculum_scale`` and
    ``curriculum_drop`` rescale or ablate the recipe's schedule, and
    ``step5_augmentation: false`` turns the augmentation stage off.
    """
    values = dict(values or {})
    recipe = values.pop("recipe", "toy")
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    cfg = RECIPES[recipe]()
    if "train" in values:
        cfg.train = _train_from_dict(values.pop("train") or {}, cfg.train)
    if "data" in values:
        cfg.data = _build(DataConfig, values.pop("data") or {}, cfg.data)
    if "curriculum" in values:
        cfg.curriculum = tuple(CurriculumStep(**s) for s in values.pop("curriculum"))
    if "curriculum_scale" in values:
        cfg.curriculum = scale_curriculum(cfg.curriculum, float(values.pop("curriculum_scale")))
    if "curriculum_drop" in values:
        cfg.curriculum = ablate_curriculum(cfg.curriculum, [int(s) for s in values.pop("curriculum_drop")])
    if not values.pop("step5_augmentation", True):
        cfg.curriculum = tuple(replace(s, augmentation=False) for s in cfg.curriculum)
    for key in ("separator", "separator_window", "seed", "distortions"):
        if key in values:
            setattr(cfg, key, values.pop(key))
    if values:
        raise ConfigError(f"unknown config keys: {sorted(values)}")
    cfg.__post_init__()
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        values = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if values is not None and not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(values or {})


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def config_fingerprint(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
