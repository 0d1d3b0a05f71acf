import json

import pytest

from scenarioctr.config import RunConfig, load_config
from scenarioctr.errors import ConfigError, DataFormatError


class TestDefaults:
    def test_published_training_settings(self):
        cfg = RunConfig()
        assert cfg.learning_rate == 5e-4
        assert cfg.batch_size == 128
        assert cfg.hidden == (128, 64)
        assert cfg.heads == 4
        assert cfg.global_dim == 12
        assert cfg.specific_dim == 4
        assert cfg.variant == "full"

    def test_to_dict_round_trips(self):
        cfg = RunConfig(variant="no_gate", epochs=3, hidden=(16, 8))
        assert RunConfig.from_dict(cfg.to_dict()) == cfg


class TestValidation:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="learning_rat"):
            RunConfig.from_dict({"learning_rat": 1e-3})

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(variant="resnet")

    @pytest.mark.parametrize("bad", [
        {"epochs": 0},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"learning_rate": -1e-4},
        {"hidden": ()},
        {"hidden": (128, 0)},
        {"heads": 0},
        {"global_dim": 0},
        {"max_seq_len": 0},
        {"mutual_layer": 3},
        {"mutual_layer": 0},
        {"scenario_filter": -1},
    ])
    def test_bad_values_rejected(self, bad):
        with pytest.raises(ConfigError):
            RunConfig(**bad)

    def test_hidden_coerced_to_int_tuple(self):
        cfg = RunConfig.from_dict({"hidden": [32, 16]})
        assert cfg.hidden == (32, 16)
        assert all(isinstance(w, int) for w in cfg.hidden)


class TestPrecedence:
    def test_file_beats_default(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"epochs": 3, "variant": "no_aux"}))
        cfg = load_config(str(p))
        assert cfg.epochs == 3
        assert cfg.variant == "no_aux"
        assert cfg.batch_size == 128  # untouched default

    def test_flag_beats_file(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text(json.dumps({"epochs": 3, "batch_size": 64}))
        cfg = load_config(str(p), epochs=7)
        assert cfg.epochs == 7
        assert cfg.batch_size == 64

    def test_none_overrides_are_ignored(self):
        cfg = RunConfig(epochs=5).with_overrides(epochs=None, seed=None)
        assert cfg.epochs == 5

    def test_override_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(epoch=2)

    def test_no_file_gives_defaults(self):
        assert load_config() == RunConfig()


class TestFileParsing:
    def test_bad_json_rejected(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text("{not json")
        with pytest.raises(DataFormatError):
            RunConfig.from_file(str(p))

    def test_non_object_rejected(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text("[1, 2]")
        with pytest.raises(DataFormatError):
            RunConfig.from_file(str(p))
