"""Tests for experiment configuration, presets and config files."""

import json

import pytest

from inear_anc.config import (
    ExperimentConfig,
    load_config,
    merge,
    preset_config,
    save_config,
    with_seed,
)
from inear_anc.errors import ConfigError
from inear_anc.scene import IPSILATERAL, DoA


def describe_presets():
    def it_defaults_to_the_full_scale_parameters():
        config = preset_config("paper")
        assert config.scene.synthetic.sample_rate == 44100.0
        assert config.scene.synthetic.path_length == 712
        assert config.estimation.secondary_length == 712
        assert config.design.filter_length == 512
        assert config.design.dft_length == 8192
        assert config.design.beta_relative == 0.01
        assert config.design.rho == 0.8
        assert config.design.r0_band == (100.0, 12000.0)
        assert (config.band.f_low, config.band.f_high) == (100.0, 4000.0)
        assert config.calibration.duration == 4.0

    def it_shrinks_everything_for_the_fast_preset():
        config = preset_config("fast")
        assert config.design.filter_length == 64
        assert config.design.dft_length == 1024
        assert config.estimation.secondary_length == 128
        assert config.scene.synthetic.path_length == 128
        assert config.calibration.duration == 1.0
        assert config.plan.duration == 1.0

    def it_rejects_unknown_presets():
        with pytest.raises(ConfigError, match="unknown preset"):
            preset_config("tiny")


def describe_load_config():
    def it_starts_from_the_paper_preset():
        assert load_config() == preset_config("paper")

    def it_layers_preset_file_and_overrides(tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"design": {"filter_length": 32, "rho": 0.7}}))
        config = load_config(path, "fast", {"design": {"filter_length": 16}})
        assert config.design.filter_length == 16
        assert config.design.rho == 0.7
        assert config.design.dft_length == 1024

    def it_round_trips_a_saved_config(tmp_path):
        original = preset_config("fast")
        path = save_config(original, tmp_path / "saved.json")
        assert load_config(path) == original

    def it_names_unknown_fields(tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"design": {"filter_lenght": 32}}))
        with pytest.raises(ConfigError, match="filter_lenght"):
            load_config(path)

    def it_rejects_unknown_sections():
        with pytest.raises(ConfigError, match="unknown config field 'metrics'"):
            ExperimentConfig.from_dict({"metrics": {}})

    def it_reports_a_missing_file(tmp_path):
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(tmp_path / "absent.json")

    def it_reports_invalid_json(tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{design: 1")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)


def describe_experiment_config():
    def it_requires_a_dft_long_enough_for_the_lag_span():
        with pytest.raises(ConfigError, match="correlation span"):
            load_config(overrides={"design": {"dft_length": 1024}})

    def it_requires_records_longer_than_the_lag_span():
        with pytest.raises(ConfigError, match="too short"):
            load_config(preset="fast", overrides={"calibration": {"duration": 0.001}})

    def it_rejects_a_band_beyond_nyquist():
        with pytest.raises(ConfigError, match="Nyquist"):
            load_config(preset="fast", overrides={"band": {"f_high": 30000.0}})

    def it_maps_field_kinds_to_noise_fields():
        config = load_config(preset="fast", overrides={"calibration": {"field": "ipsi"}})
        assert config.calibration.doa == IPSILATERAL
        noise = config.calibration.noise(44100.0)
        assert noise.kind == "single_doa"
        assert noise.n_samples == 44100

    def it_needs_an_azimuth_for_a_single_doa_field():
        with pytest.raises(ConfigError, match="azimuth"):
            load_config(preset="fast", overrides={"calibration": {"field": "doa"}})
        config = load_config(preset="fast",
                             overrides={"calibration": {"field": "doa", "azimuth": 45.0}})
        assert config.calibration.doa == DoA(45.0)

    def it_needs_a_held_out_repetition_for_reinsertion():
        with pytest.raises(ConfigError, match="held_out"):
            load_config(preset="fast", overrides={"plan": {"kind": "reinsertion"}})

    def it_passes_plan_settings_to_sweeps():
        config = load_config(preset="fast", overrides={"plan": {"workers": 3, "seed": 9}})
        settings = config.sweep_settings()
        assert settings.workers == 3
        assert settings.seed == 9
        assert settings.dft_length == 1024
        assert settings.secondary_length == 128


def describe_with_seed():
    def it_derives_every_seed_from_one_value():
        config = with_seed(preset_config("fast"), 42)
        assert config.scene.synthetic.seed == 42
        assert config.calibration.seed == 42
        assert config.plan.seed == 43


def describe_merge():
    def it_merges_nested_sections():
        merged = merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"c": 4}})
        assert merged == {"a": {"b": 1, "c": 4}, "d": 3}
