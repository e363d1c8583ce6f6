"""Config plumbing: strict keys, typed overrides, stable hashing."""

import json

import pytest

from frameflow.config import (RunConfig, apply_overrides, build_encoders,
                              build_model, config_from_dict, config_hash,
                              config_to_dict, engine_settings, load_config,
                              save_config)
from frameflow.errors import ConfigError


def test_default_config_roundtrips_through_its_dict():
    cfg = RunConfig()
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)
    assert len(config_hash(cfg)) == 12


def test_unknown_sections_and_keys_are_rejected():
    with pytest.raises(ConfigError, match="section"):
        config_from_dict({"modell": {}})
    with pytest.raises(ConfigError, match="d_modell"):
        config_from_dict({"model": {"d_modell": 16}})
    with pytest.raises(ConfigError):
        config_from_dict({"model": 3})


def test_partial_configs_fill_in_defaults():
    cfg = config_from_dict({"dropping": {"beta": 0.5, "policy": "interleaved"}})
    assert cfg.dropping.beta == 0.5
    assert cfg.model.d_model == 64  # untouched section keeps its defaults


def test_overrides_touch_one_field_and_keep_the_original():
    cfg = RunConfig()
    out = apply_overrides(cfg, ["dropping.beta=0.5", "model.n_layers=4",
                                "dropping.policy=interleaved",
                                "slow_path.enabled=false"])
    assert (out.dropping.beta, out.model.n_layers) == (0.5, 4)
    assert out.dropping.policy == "interleaved"
    assert out.slow_path.enabled is False
    assert cfg.dropping.beta == 0.0  # the input config is never mutated
    assert config_hash(out) != config_hash(cfg)


@pytest.mark.parametrize("bad", [
    "model.n_layers=1.5",  # float into an int field
    "slow_path.enabled=maybe",  # not a bool
    "train.lr=fast",  # not a number
    "dropping.policy=3",  # not a string
    "model.width=3",  # no such key
    "nonsense",  # no assignment at all
    "beta=0.5",  # missing section
])
def test_bad_overrides_are_config_errors(bad):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), [bad])


def test_whole_numbers_normalize_to_floats_for_hash_stability():
    a = config_from_dict({"train": {"lr": 1}})
    b = config_from_dict({"train": {"lr": 1.0}})
    assert a.train.lr == 1.0 and isinstance(a.train.lr, float)
    assert config_hash(a) == config_hash(b)


def test_config_file_roundtrip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["dropping.beta=0.8", "data.seed=9"])
    path = tmp_path / "run.json"
    save_config(path, cfg)
    assert load_config(path) == cfg
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_factories_honor_the_config():
    cfg = apply_overrides(RunConfig(), [
        "model.d_model=32", "model.n_layers=4", "model.n_heads=2",
        "model.vocab_size=32", "model.enc_width=16",
        "dropping.beta=0.5", "dropping.policy=interleaved",
    ])
    model = build_model(cfg)
    assert model.d_model == 32 and model.n_layers == 4
    assert model.d_ff == 128  # unset d_ff widens to 4x
    assert model.vocab.size == 32
    assert model.router.beta == 0.5
    assert model.router.routed_layers == {1, 3}
    general, ego = build_encoders(cfg)
    assert general.width == ego.width == 16
    es = engine_settings(cfg)
    assert es.use_slow_path and es.use_box and not es.fine_grained


def test_saved_config_is_sorted_and_sectioned(tmp_path):
    path = tmp_path / "cfg.json"
    save_config(path, RunConfig())
    data = json.loads(path.read_text())
    assert set(data) == {"model", "aggregation", "dropping", "slow_path",
                         "data", "train", "metrics"}
