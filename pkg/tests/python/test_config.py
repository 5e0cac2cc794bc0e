"""TOML experiment configuration."""

from pathlib import Path

import pytest

from fedpeft.config import (
    ExperimentConfig,
    apply_overrides,
    config_to_toml,
    load_config,
    parse_override,
)
from fedpeft.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parents[2] / "config"


class TestLoad:
    @pytest.mark.parametrize("name", ["experiment.toml", "smoke.toml"])
    def test_shipped_configs_load(self, name):
        config = load_config(CONFIG_DIR / name)
        assert config.pruning.mode == "importance"

    def test_missing_keys_take_defaults(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[experiment]\nseed = 3\n", encoding="utf-8")
        config = load_config(path)
        assert config.experiment.seed == 3
        assert config.federation == ExperimentConfig().federation

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[experiment\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_config(path)

    def test_round_trip_through_toml(self, tmp_path, fast_config):
        path = tmp_path / "written.toml"
        path.write_text(config_to_toml(fast_config), encoding="utf-8")
        assert load_config(path) == fast_config


class TestValidation:
    """Every failure names its section.key."""

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="pruning.spasity"):
            ExperimentConfig.from_dict({"pruning": {"spasity": 0.5}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="server"):
            ExperimentConfig.from_dict({"server": {}})

    @pytest.mark.parametrize("value", [1.0, -0.1])
    def test_sparsity_range(self, value):
        with pytest.raises(ConfigError, match="pruning.sparsity") as info:
            ExperimentConfig.from_dict({"pruning": {"sparsity": value}})
        assert info.value.field == "pruning.sparsity"

    def test_more_selected_than_clients(self):
        with pytest.raises(ConfigError, match="federation.clients_per_round"):
            ExperimentConfig.from_dict({"federation": {"n_clients": 3, "clients_per_round": 4}})

    def test_bad_choice(self):
        with pytest.raises(ConfigError, match="aggregation.mode"):
            ExperimentConfig.from_dict({"aggregation": {"mode": "median"}})

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="experiment.rounds"):
            ExperimentConfig.from_dict({"experiment": {"rounds": "ten"}})

    def test_int_accepted_for_float(self):
        config = ExperimentConfig.from_dict({"training": {"learning_rate": 1}})
        assert config.training.learning_rate == 1.0 and isinstance(config.training.learning_rate, float)

    def test_bool_is_not_an_int(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"experiment": {"seed": True}})

    def test_model_section_validated(self):
        with pytest.raises(ConfigError, match="model.d_model"):
            ExperimentConfig.from_dict({"model": {"d_model": 30}})

    def test_more_clients_than_samples(self):
        with pytest.raises(ConfigError, match="federation.n_clients"):
            ExperimentConfig.from_dict({"data": {"train_samples": 4}, "federation": {"n_clients": 8}})


class TestOverrides:
    def test_parse_scalar_types(self):
        assert parse_override("pruning.sparsity=0.9") == ("pruning.sparsity", 0.9)
        assert parse_override("experiment.rounds = 5") == ("experiment.rounds", 5)
        assert parse_override("aggregation.wire_roundtrip=true") == ("aggregation.wire_roundtrip", True)
        assert parse_override("pruning.mode=importance") == ("pruning.mode", "importance")

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            parse_override("rounds")

    def test_apply(self, fast_config):
        config = apply_overrides(fast_config, {"pruning.sparsity": 0.9, "pruning.mode": "random"})
        assert config.pruning.sparsity == 0.9 and config.pruning.mode == "random"
        assert fast_config.pruning.sparsity == 0.0

    def test_apply_unknown_key(self, fast_config):
        with pytest.raises(ConfigError, match="training.momentum"):
            apply_overrides(fast_config, {"training.momentum": 0.9})

    def test_apply_revalidates(self, fast_config):
        with pytest.raises(ConfigError, match="federation.clients_per_round"):
            apply_overrides(fast_config, {"federation.clients_per_round": 9})
