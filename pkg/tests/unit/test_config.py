"""
Unit tests for mrfei.config module.
"""

import json
from pathlib import Path

import pytest

from mrfei.config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    from_dict,
    load_config,
    read_config_file,
    write_config,
)
from mrfei.training import TrainMode


class TestPresets:
    """Tests for the built-in presets."""

    def test_desk(self):
        cfg = load_config()
        assert cfg.name == "desk"
        assert (cfg.size, cfg.samples_per_frame, cfg.t) == (64, 63, 10)
        assert cfg.compression_ratio == pytest.approx(4096 / 63)
        assert cfg.train.epochs == 150
        assert cfg.smooth is True

    def test_full(self):
        cfg = load_config(preset="full")
        assert (cfg.size, cfg.n_train, cfg.n_test, cfg.samples_per_frame) == (224, 105, 15, 771)
        assert cfg.train.lr_drop_epoch == 300
        assert cfg.smooth is False
        assert 0.0 in cfg.sweep_alphas and 1e6 in cfg.sweep_alphas

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="Unknown preset"):
            load_config(preset="huge")

    def test_presets_validate(self):
        for name in PRESETS:
            load_config(preset=name).validate()


class TestExperimentConfig:
    """Tests for ExperimentConfig helpers."""

    def test_default_m_from_compression(self):
        cfg = ExperimentConfig(size=64, m=None)
        assert cfg.samples_per_frame == 63

    def test_alpha_for(self):
        cfg = ExperimentConfig(pattern="epi", alpha_ei=0.5)
        assert cfg.alpha_for("nlei") == 1e-4
        assert cfg.alpha_for("ei") == 0.5
        assert cfg.alpha_for("supervised") == 0.0

    def test_train_config(self):
        cfg = ExperimentConfig(seed=9)
        train = cfg.train_config("ei", alpha=0.25)
        assert train.mode is TrainMode.EI
        assert train.alpha == 0.25
        assert train.seed == 9

    @pytest.mark.parametrize(
        "changes, key",
        [
            ({"pattern": "radial"}, "pattern"),
            ({"methods": ("nlei", "magic")}, "methods"),
            ({"size": 50}, "size"),
            ({"m": 0}, "m"),
            ({"t": 3}, "t"),
            ({"n_states": 1}, "n_states"),
            ({"sweep_alphas": (-1.0,)}, "sweep_alphas"),
            ({"alpha_nlei": -1.0}, "alpha_nlei"),
            ({"workers": 0}, "workers"),
        ],
    )
    def test_validate(self, changes, key):
        with pytest.raises(ConfigError) as exc_info:
            ExperimentConfig(**changes).validate()
        assert exc_info.value.key == key

    def test_digest_tracks_changes(self):
        assert ExperimentConfig().digest() == ExperimentConfig().digest()
        assert ExperimentConfig().digest() != ExperimentConfig(seed=1).digest()


class TestLoading:
    """Tests for reading, merging and writing configuration files."""

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError) as exc_info:
            from_dict({"size": 32, "colour": "blue"})
        assert exc_info.value.key == "colour"

    def test_unknown_train_key(self):
        with pytest.raises(ConfigError, match=r"\[train\]"):
            from_dict({"train": {"momentum": 0.9}})

    def test_per_method_key_rejected_in_train(self):
        with pytest.raises(ConfigError):
            from_dict({"train": {"alpha": 1.0}})

    def test_train_error_wrapped(self):
        with pytest.raises(ConfigError) as exc_info:
            from_dict({"train": {"epochs": 0}})
        assert exc_info.value.key == "train"

    def test_toml_file_and_overrides(self, temp_dir: Path):
        path = temp_dir / "exp.toml"
        path.write_text('size = 32\nm = 16\n[train]\nepochs = 3\ndepth = 1\n', encoding="utf-8")
        cfg = load_config(path, overrides={"n_train": 4, "n_test": None})
        assert (cfg.size, cfg.m, cfg.n_train, cfg.n_test) == (32, 16, 4, 5)
        assert cfg.train.epochs == 3
        assert cfg.train.lr_drop_epoch == 100

    def test_file_selects_preset(self, temp_dir: Path):
        path = temp_dir / "exp.json"
        path.write_text(json.dumps({"preset": "full", "n_train": 2}), encoding="utf-8")
        cfg = load_config(path)
        assert cfg.size == 224
        assert cfg.n_train == 2

    def test_missing_file(self, temp_dir: Path):
        with pytest.raises(ConfigError, match="not found"):
            read_config_file(temp_dir / "nope.toml")

    def test_malformed_file(self, temp_dir: Path):
        path = temp_dir / "bad.toml"
        path.write_text("size = = 3", encoding="utf-8")
        with pytest.raises(ConfigError, match="Cannot parse"):
            read_config_file(path)

    def test_write_and_reload(self, temp_dir: Path):
        cfg = load_config(overrides={"seed": 4, "alpha_nlei": 1e-3})
        path = write_config(cfg, temp_dir / "sub" / "written.toml")
        assert load_config(path) == cfg
