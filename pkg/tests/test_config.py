import dataclasses

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from direid.config import (ConfigError, ExperimentConfig, apply_overrides, dump_config,
                           from_dict, load_config, to_dict)


def test_defaults_round_trip(tmp_path):
    cfg = load_config()
    dump_config(cfg, tmp_path / "a.yaml")
    again = load_config(tmp_path / "a.yaml")
    dump_config(again, tmp_path / "b.yaml")
    assert again == cfg
    assert (tmp_path / "a.yaml").read_bytes() == (tmp_path / "b.yaml").read_bytes()


def test_overrides_are_typed():
    cfg = load_config(overrides=["train.ddgan.iterations=12", "network.height=32",
                                 "train.ddgan.lr_gan=0.001", "data.degrade_train_query_camera=false"])
    assert cfg.train.ddgan.iterations == 12 and isinstance(cfg.train.ddgan.iterations, int)
    assert cfg.network.height == 32
    assert cfg.train.ddgan.lr_gan == pytest.approx(1e-3)
    assert cfg.data.degrade_train_query_camera is False


@pytest.mark.parametrize("key", ["train.ddgan.iterz", "nope", "network.height.x", "eval.k"])
def test_unknown_key_is_named(key):
    with pytest.raises(ConfigError, match=key.split(".x")[0]):
        load_config(overrides=[f"{key}=1"])


def test_override_needs_equals():
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides({"a": 1}, ["a"])


def test_unknown_key_in_file_is_named(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"train": {"dfen": {"lr_headd": 1.0}}}))
    with pytest.raises(ConfigError, match="train.dfen.lr_headd"):
        load_config(p)


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/cfg.yaml")


def test_file_then_overrides_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"train": {"ddgan": {"iterations": 7}}, "seed": 3}))
    cfg = load_config(p, ["train.ddgan.iterations=9"])
    assert cfg.train.ddgan.iterations == 9
    assert cfg.seed == 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_global_seed_reaches_every_stage_and_evaluator(seed):
    cfg = load_config(overrides=[f"seed={seed}"])
    assert {cfg.train.pretrain_id.seed, cfg.train.ddgan.seed, cfg.train.dfen.seed,
            cfg.eval.seed} == {seed}


def test_invalid_values_rejected():
    with pytest.raises((ConfigError, ValueError)):
        load_config(overrides=["train.ddgan.iterations=-1"])
    with pytest.raises((ConfigError, ValueError)):
        load_config(overrides=["network.encoder_scales=4"])


def test_to_dict_from_dict_inverse():
    cfg = ExperimentConfig()
    assert from_dict(ExperimentConfig, to_dict(cfg)) == cfg
    assert dataclasses.is_dataclass(from_dict(ExperimentConfig, {}))
