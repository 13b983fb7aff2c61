"""Config parsing, seed spreading, environment overrides, and hashing."""

import dataclasses

import pytest

from uarchfuzz.config import (
    RunConfig,
    apply_env_overrides,
    config_hash,
    config_to_sections,
    from_dict,
    load_config,
    render_toml,
)
from uarchfuzz.errors import ConfigError


def test_defaults_are_sim_synthetic():
    cfg = RunConfig()
    assert cfg.backend == "sim"
    assert cfg.catalog == "synthetic"
    assert cfg.env.max_len == 10
    assert cfg.env.leak_weight == 300.0
    assert cfg.env.granularity == 4


def test_from_dict_sections():
    cfg = from_dict(
        {
            "run": {"backend": "sim", "scenario": "medium", "cores": [0, 1]},
            "env": {"max_len": 4},
            "train": {"seed": 9},
        }
    )
    assert cfg.scenario == "medium"
    assert cfg.cores == (0, 1)
    assert cfg.env.max_len == 4
    assert cfg.train.seed == 9


def test_from_dict_rejects_unknown_sections_and_keys():
    with pytest.raises(ConfigError, match="unknown top-level section"):
        from_dict({"backend": {"name": "sim"}})
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict({"run": {"backnd": "sim"}})
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict({"env": {"max_length": 3}})


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError):
        from_dict({"run": {"backend": "qemu"}})
    with pytest.raises(ConfigError):
        from_dict({"env": {"granularity": 3}})
    with pytest.raises(ConfigError):
        from_dict({"env": {"max_len": 0}})


def test_master_seed_spreads_distinct_component_seeds():
    cfg = RunConfig().with_master_seed(100)
    seeds = {cfg.seed, cfg.scenario_seed, cfg.env.seed, cfg.train.seed, cfg.observer.embed_seed}
    assert len(seeds) == 5
    assert cfg.seed == 100


def test_env_overrides(monkeypatch):
    cfg = apply_env_overrides(
        RunConfig(), {"UARCHFUZZ_BACKEND": "hw", "UARCHFUZZ_SEED": "17"}
    )
    assert cfg.backend == "hw"
    assert cfg.seed == 17
    with pytest.raises(ConfigError):
        apply_env_overrides(RunConfig(), {"UARCHFUZZ_SEED": "lots"})


def test_toml_round_trip(tmp_path):
    cfg = from_dict({"run": {"scenario": "hard", "seed": 3}, "train": {"hidden": 32}})
    path = tmp_path / "run.toml"
    path.write_text(render_toml(cfg))
    again = load_config(path)
    assert again == cfg


def test_load_config_bad_toml_and_missing_file(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\nbackend =")
    with pytest.raises(ConfigError, match="invalid TOML"):
        load_config(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.toml")


def test_sections_shape_feeds_back_into_from_dict():
    cfg = RunConfig().with_master_seed(5)
    assert from_dict(config_to_sections(cfg)) == cfg


def test_config_hash_tracks_any_field():
    a = RunConfig()
    b = dataclasses.replace(a, env=dataclasses.replace(a.env, leak_weight=299.0))
    assert config_hash(a) == config_hash(RunConfig())
    assert config_hash(a) != config_hash(b)
