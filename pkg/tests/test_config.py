import pytest

from msras.config import (
    RunConfig, config_fingerprint, config_from_dict, dump_config, load_config, full_recipe, toy_recipe,
)
from msras.model import ConfigError
from msras.training import total_iterations


def test_toy_recipe_defaults():
    cfg = toy_recipe()
    assert cfg.train.sample_rate == 8000
    assert cfg.train.model.samples_per_frame == 256
    assert tuple(cfg.train.windows) == (256, 512, 1024, 2048)
    assert [s.iterations for s in cfg.curriculum] == [100, 500, 1000, 400, 1000]
    assert cfg.train.learning_rate == 1e-3 and cfg.train.batch_size == 12
    assert cfg.separator == "oracle" and cfg.train.embedded_stems == ("drums",)
    assert cfg.train.carrier_scale == (1.0, 100.0)
    assert full_recipe().train.carrier_scale == (1.0, 1.0)


def test_full_recipe_defaults():
    cfg = full_recipe()
    assert cfg.train.model.samples_per_frame == 1024 and cfg.train.sample_rate == 44100
    assert total_iterations(cfg.curriculum) == 15000


def test_yaml_round_trip(tmp_path):
    cfg = toy_recipe()
    path = tmp_path / "run.yaml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert config_fingerprint(again) == config_fingerprint(cfg)


def test_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "recipe: toy\n"
        "seed: 5\n"
        "curriculum_scale: 0.1\n"
        "step5_augmentation: false\n"
        "train:\n  embedded_stems: [drums, vocals]\n  model: {h: 16}\n  augmentation: {noise_sigma: 0.01}\n"
        "data: {train_clips: 4}\n"
    )
    cfg = load_config(path)
    assert cfg.seed == 5 and cfg.data.train_clips == 4
    assert cfg.train.embedded_stems == ("drums", "vocals")
    assert cfg.train.model.h == 16 and cfg.train.model.base_channels == 64
    assert cfg.train.augmentation.noise_sigma == 0.01
    assert [s.iterations for s in cfg.curriculum] == [10, 50, 100, 40, 100]
    assert not any(s.augmentation for s in cfg.curriculum)
    assert config_fingerprint(cfg) != config_fingerprint(toy_recipe())


def test_ablation_key():
    cfg = config_from_dict({"curriculum_drop": [4]})
    assert [s.step_id for s in cfg.curriculum] == [1, 2, 3, 5]
    assert total_iterations(cfg.curriculum) == 3000


@pytest.mark.parametrize("values", [
    {"recipe": "huge"},
    {"bogus": 1},
    {"train": {"nope": 1}},
    {"train": {"model": {"base_channels": 20}}},
    {"data": {"source": "directory"}},
])
def test_bad_configs_rejected(values):
    with pytest.raises(ConfigError):
        config_from_dict(values)


def test_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_run_config_is_dataclass_default():
    assert isinstance(RunConfig().to_dict(), dict)
