"""
Tests for run configuration.
"""

import json

import pytest

from protomargin.config import (
    PRESETS,
    ConfigError,
    RunConfig,
    describe_keys,
    load_config_file,
    resolve_config,
    save_config,
)


class TestRunConfig:
    """Tests for RunConfig."""

    def test_flat_round_trip(self):
        """Test that the dotted-key form rebuilds an equal config."""
        config = RunConfig.from_flat({"seed": 3, "train.k": 1, "synth.confounder_strength": 0.9})

        assert RunConfig.from_flat(config.to_flat()) == config

    def test_seed_propagates(self):
        """Test that the master seed reaches training and evaluation."""
        config = RunConfig(seed=11)

        assert config.train.seed == 11
        assert config.eval.seed == 11

    def test_image_size_follows_corpus(self):
        """Test that training uses the corpus image size."""
        config = RunConfig.from_flat({"synth.image_size": 48, "train.channels": [3, 4]})

        assert config.train.image_size == 48

    def test_derived_keys_hidden(self):
        """Test that derived and logger fields are not exposed."""
        flat = RunConfig().to_flat()

        assert "train.seed" not in flat
        assert "train.image_size" not in flat
        assert not any(key.endswith("logger_name") for key in flat)

    def test_tuples_flatten_to_lists(self):
        """Test that tuple fields become JSON lists."""
        flat = RunConfig().to_flat()

        assert flat["data.split_counts"] == [600, 100, 125]
        assert flat["train.channels"] == [16, 32, 64]
        json.dumps(flat)

    def test_unknown_key(self):
        """Test that misspelled keys are rejected by name."""
        with pytest.raises(ConfigError, match="train.lamda_f"):
            RunConfig.from_flat({"train.lamda_f": 0.0})

    @pytest.mark.parametrize(
        "key,value",
        [
            ("train.k", "five"),
            ("train.k", 2.5),
            ("train.augment", 1),
            ("train.lambda_f", True),
            ("data.split_ratios", 0.5),
            ("seed", None),
        ],
    )
    def test_wrong_types(self, key, value):
        """Test that values of the wrong type are rejected."""
        with pytest.raises(ConfigError, match=key.split(".")[-1]):
            RunConfig.from_flat({key: value})

    def test_integer_accepted_for_float(self):
        """Test that whole numbers are valid for float settings."""
        config = RunConfig.from_flat({"train.lambda_f": 0})

        assert config.train.lambda_f == 0.0
        assert isinstance(config.train.lambda_f, float)

    def test_invalid_value_wrapped(self):
        """Test that section validation errors surface as ConfigError."""
        with pytest.raises(ConfigError, match="lambda_c"):
            RunConfig.from_flat({"train.lambda_c": -1.0})

    def test_split_counts_must_match_corpus(self):
        """Test that explicit split sizes must cover the corpus exactly."""
        with pytest.raises(ConfigError, match="split_counts"):
            RunConfig.from_flat({"synth.class_counts": [4, 4, 4]})

    def test_null_split_counts_uses_ratios(self):
        """Test that null split counts are allowed for any corpus size."""
        config = RunConfig.from_flat(
            {"synth.class_counts": [4, 4, 4], "data.split_counts": None}
        )

        assert config.data.split_counts is None


class TestResolve:
    """Tests for config files, presets and precedence."""

    def test_defaults(self):
        """Test that nothing given yields the default config."""
        assert resolve_config() == RunConfig()

    def test_protopnet_preset(self):
        """Test the k = 1, lambda_f = 0 preset."""
        config = resolve_config(preset="protopnet")

        assert (config.train.k, config.train.lambda_f) == (1, 0.0)
        assert set(PRESETS) >= {"default", "protopnet"}

    def test_precedence(self, tmp_path):
        """Test file < preset < explicit overrides."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train.k": 3, "train.lambda_f": 0.5, "seed": 2}))

        config = resolve_config(path, preset="protopnet", overrides={"train.lambda_f": 0.01})

        assert config.seed == 2
        assert config.train.k == 1
        assert config.train.lambda_f == 0.01

    def test_unknown_preset(self):
        """Test that unknown presets are rejected."""
        with pytest.raises(ConfigError, match="unknown preset"):
            resolve_config(preset="fast")

    def test_save_and_load(self, tmp_path):
        """Test that a saved config resolves back to itself."""
        config = RunConfig.from_flat({"seed": 5, "train.k": 2})

        path = save_config(config, tmp_path / "saved.json")

        assert resolve_config(path) == config

    def test_missing_file(self, tmp_path):
        """Test that an unreadable file raises ConfigError."""
        with pytest.raises(ConfigError, match="cannot read"):
            load_config_file(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        """Test that malformed JSON raises ConfigError."""
        path = tmp_path / "bad.json"
        path.write_text("{seed: 1")

        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config_file(path)

    def test_non_object(self, tmp_path):
        """Test that a JSON list is not a config."""
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")

        with pytest.raises(ConfigError, match="JSON object"):
            load_config_file(path)


class TestDescribeKeys:
    """Tests for describe_keys."""

    def test_every_key_described(self):
        """Test that each exposed key has a default and a description."""
        rows = describe_keys()
        keys = [key for key, _, _ in rows]

        assert keys == list(RunConfig().to_flat())
        assert all(text for _, _, text in rows)

    def test_multiline_descriptions_joined(self):
        """Test that wrapped attribute docs are joined into one line."""
        text = {key: text for key, _, text in describe_keys()}["train.lambda_f"]

        assert "ablation" in text
