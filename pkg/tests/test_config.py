import json

import pytest

from amenable.config import config_from_dict, load_raw, parse_config, serialize_config
from amenable.errors import ConfigError
from amenable.runner import config_with_overrides


def test_minimal_config_fills_defaults():
    cfg = config_from_dict({"mode": "single", "task": "classification"})
    assert cfg.controller.recurrent is False
    assert cfg.reward.strategy == "weighted" and cfg.reward.alpha == 0.9
    assert cfg.reward.s_rej == 0.05 and cfg.evaluation.holdout_ratio == 0.05
    assert cfg.rl.algorithm == "ppo" and cfg.rl.ppo.clip_ratio == 0.2
    assert cfg.predictor.lr == 1e-3


def test_segmentation_task_defaults():
    cfg = config_from_dict({"task": "segmentation"})
    assert cfg.reward.s_rej == 0.15 and cfg.evaluation.holdout_ratio == 0.15


def test_meta_mode_resolves_recurrent_controller():
    assert config_from_dict({"mode": "meta"}).controller.recurrent is True


def test_ddpg_in_meta_rejected():
    with pytest.raises(ConfigError, match="DDPG unavailable in meta mode"):
        config_from_dict({"mode": "meta", "rl": "ddpg"})


def test_selective_with_full_rejection_rejected():
    with pytest.raises(ConfigError, match="M' would be 0"):
        config_from_dict({"reward": "selective", "s_rej": 1.0})


def test_unknown_key_reports_path():
    with pytest.raises(ConfigError, match=r"training\.trails"):
        config_from_dict({"training": {"trails": 3}})


def test_type_error_reports_path():
    with pytest.raises(ConfigError, match=r"rl\.ppo\.epochs"):
        config_from_dict({"rl": {"ppo": {"epochs": 0}}})


def test_controller_kind_must_match_mode():
    with pytest.raises(ConfigError, match="feed-forward"):
        config_from_dict({"mode": "single", "controller": {"recurrent": True}})


def test_round_trip(tmp_path):
    cfg = config_from_dict({"mode": "meta", "seed": 3, "reward": {"strategy": "selective", "s_rej": 0.2}})
    path = tmp_path / "c.json"
    path.write_text(serialize_config(cfg))
    assert parse_config(path) == cfg


def test_toml_config(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('mode = "single"\nseed = 4\n[reward]\nstrategy = "fixed"\n')
    cfg = parse_config(path)
    assert cfg.seed == 4 and cfg.reward.strategy == "fixed"


def test_unparseable_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_raw(path)


def test_dotted_overrides():
    cfg = config_with_overrides({"reward": {"strategy": "selective"}}, {"reward.s_rej": 0.3, "training.trials": 2})
    assert cfg.reward.s_rej == 0.3 and cfg.training.trials == 2


def test_serialized_config_is_json():
    doc = json.loads(serialize_config(config_from_dict({})))
    assert doc["mode"] == "single"
