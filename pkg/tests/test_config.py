import json

import pytest

from selfdenoise.config import (DEFAULTS, ConfigError, build_model, dumps, episode_spec, load_config, make_config,
                                noise_specs, set_path, train_config)
from selfdenoise.noise import NO_NOISE


def test_defaults_exact():
    cfg = make_config()
    assert cfg["model"]["channels"] == [16, 16, 32, 64]
    assert cfg["model"]["pool_target"] == 2 and cfg["model"]["pool_mode"] == "max"
    assert cfg["noise"] == {"kind": "gaussian", "spatial": False, "sigma": 0.06, "p_drop": 0.1,
                            "per_block": [True, True, True]}
    t = cfg["train"]
    assert (t["epochs"], t["lr"], t["milestones"], t["momentum"], t["batch"]) == (26, 0.1, [20, 23], 0.9, 32)
    assert cfg["eval"] == {"n_way": 5, "k_shot": 1, "m_query": 15, "episodes": 2000, "seed": 0}


def test_defaults_not_mutated():
    cfg = make_config({"train": {"epochs": 3}})
    cfg["model"]["channels"].append(1)
    assert DEFAULTS["model"]["channels"] == [16, 16, 32, 64]
    assert make_config()["train"]["epochs"] == 26


@pytest.mark.parametrize("override,name", [({"trian": {}}, "trian"), ({"train": {"epoch": 3}}, "train.epoch"),
                                           ({"noise": {"sigmaa": 0.1}}, "noise.sigmaa")])
def test_unknown_key_named(override, name):
    with pytest.raises(ConfigError, match=name.replace(".", r"\.")):
        make_config(override)


@pytest.mark.parametrize("override", [{"train": {"epochs": "3"}}, {"train": {"epochs": 2.5}},
                                      {"model": {"aux": 1}}, {"train": {"seed": True}}, {"noise": {"sigma": "x"}},
                                      {"model": 3}])
def test_type_errors(override):
    with pytest.raises(ConfigError):
        make_config(override)


@pytest.mark.parametrize("override", [{"model": {"channels": [16, 16]}}, {"noise": {"per_block": [True]}},
                                      {"model": {"pool_mode": "median"}}, {"noise": {"kind": "salt"}},
                                      {"noise": {"p_drop": 1.0}}, {"noise": {"sigma": -0.1}},
                                      {"train": {"lr": 0.0}}, {"train": {"epochs": 0}}])
def test_value_errors(override):
    with pytest.raises(ConfigError):
        make_config(override)


def test_int_accepted_for_float():
    assert make_config({"train": {"lr": 1}})["train"]["lr"] == 1


def test_load_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"epochs": 4}}))
    assert load_config(path)["train"]["epochs"] == 4
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(path)


def test_dumps_canonical():
    a = dumps(make_config())
    assert a == dumps(json.loads(a))
    assert json.loads(a) == make_config()


def test_set_path():
    cfg = set_path(make_config(), "noise.sigma", 0.1)
    assert cfg["noise"]["sigma"] == 0.1
    with pytest.raises(ConfigError):
        set_path(cfg, "noise.bogus", 1)


def test_noise_per_block():
    specs = noise_specs(make_config({"noise": {"per_block": [False, True, False]}}))
    assert specs[0] is NO_NOISE and specs[2] is NO_NOISE
    assert specs[1].kind == "gaussian" and specs[1].sigma == 0.06


def test_build_model_heads():
    assert len(build_model(make_config(), 3, 4).active_heads) == 3
    assert len(build_model(make_config({"model": {"aux": False}}), 3, 4).active_heads) == 1


def test_train_and_episode_translation():
    cfg = make_config()
    tc = train_config(cfg)
    assert tc.batch_size == 32 and tc.milestones == (20, 23)
    spec = episode_spec(cfg, n_way=4, episodes=None)
    assert spec.n_way == 4 and spec.num_episodes == 2000
