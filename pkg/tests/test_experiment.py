import json

import pytest

from gapolab.errors import ConfigError
from gapolab.experiment import DEFAULTS, RunConfig, make_scenes, scene_seeds
from gapolab.rewards import UNIFORM


def test_defaults_match_documented_budget():
    cfg = RunConfig()
    assert (cfg.train_scenes, cfg.test_scenes, cfg.n_candidates) == (200, 100, 4)
    assert cfg["finetune.steps"] == 600 and cfg["pretrain.steps"] == 3000
    assert cfg["gapo.beta"] == 500.0 and cfg["gapo.alpha"] == 2.0
    assert cfg.strategy() is UNIFORM
    t = cfg.train_config("gapo")
    assert (t.mode, t.steps, t.learning_rate, t.batch_size, t.seed) == ("gapo", 600, 2e-4, 8, 0)
    assert cfg.train_config("pretrain").learning_rate == 1e-3
    assert cfg.schedule().T == 64


@pytest.mark.parametrize("bad", [
    {"nope": 1}, {"seed": -1}, {"train_scenes": 0}, {"n_candidates": 1}, {"timesteps": 2},
    {"schedule": "sigmoid"}, {"normalization": "zscore"}, {"tie_threshold": -0.1}, {"strategy": "1:2"},
    {"gapo.beta": 0}, {"gapo.alpha": 0.5}, {"gapo.omega_mode": "snr"}, {"finetune.optimizer": "lion"},
    {"finetune.steps": "many"}, {"seed": 1.5}, {"workers": True}, {"gapo.beta": "x"}, {"schedule": 3},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        RunConfig(bad)


def test_coercion_and_overrides():
    cfg = RunConfig({"seed": 3.0, "finetune.steps": "12", "gapo.beta": 7, "pretrain.max_grad_norm": 1})
    assert cfg.seed == 3 and cfg["finetune.steps"] == 12 and cfg["gapo.beta"] == 7.0
    assert cfg["pretrain.max_grad_norm"] == 1.0
    other = cfg.with_overrides({"seed": 4})
    assert other.seed == 4 and cfg.seed == 3 and other != cfg
    assert RunConfig(cfg.to_dict()) == cfg


def test_load_and_json_roundtrip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "strategy": "3:5:3:3:3:3"}))
    cfg = RunConfig.load(path, {"seed": 6})
    assert cfg.seed == 6 and cfg.strategy().weights[1] == 0.25
    path.write_text(cfg.to_json())
    assert RunConfig.load(path) == cfg
    assert list(json.loads(cfg.to_json())) == sorted(DEFAULTS)
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_scene_splits_are_disjoint_and_stable():
    train = scene_seeds(0, "train", 50)
    test = scene_seeds(0, "test", 50)
    assert not set(train) & set(test)
    assert scene_seeds(0, "train", 10) == train[:10]
    assert scene_seeds(1, "train", 10) != train[:10]
    a, b = make_scenes(0, "test", 3), make_scenes(0, "test", 3)
    assert all(x.gt_video.tobytes() == y.gt_video.tobytes() for x, y in zip(a, b))
