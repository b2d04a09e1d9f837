"""Run configuration: a JSON document with model, noise, train and eval sections.

Unknown keys are rejected so that typos fail loudly instead of silently
falling back to a default.
"""

from __future__ import annotations

import copy
import json
from typing import Any, Optional

from .fewshot import EpisodeSpec
from .model import SdnnModel, TrainConfig, canonical_json, default_blocks
from .noise import NO_NOISE, NoiseSpec

DEFAULTS: dict = {
    "model": {
        "blocks": 3,
        "channels": [16, 16, 32, 64],
        "convs_per_block": 2,
        "embed_dim": 64,
        "pool_mode": "max",
        "pool_target": 2,
        "aux": True,
    },
    "noise": {
        "kind": "gaussian",
        "spatial": False,
        "sigma": 0.06,
        "p_drop": 0.1,
        "per_block": [True, True, True],
    },
    "train": {
        "epochs": 26,
        "lr": 0.1,
        "milestones": [20, 23],
        "momentum": 0.9,
        "batch": 32,
        "seed": 0,
        "gamma_init": 10.0,
        "weight_decay": 0.0,
    },
    "eval": {
        "n_way": 5,
        "k_shot": 1,
        "m_query": 15,
        "episodes": 2000,
        "seed": 0,
    },
}

_NUMBER = (int, float)
_TYPES = {
    ("model", "blocks"): int,
    ("model", "channels"): list,
    ("model", "convs_per_block"): int,
    ("model", "embed_dim"): int,
    ("model", "pool_mode"): str,
    ("model", "pool_target"): int,
    ("model", "aux"): bool,
    ("noise", "kind"): str,
    ("noise", "spatial"): bool,
    ("noise", "sigma"): _NUMBER,
    ("noise", "p_drop"): _NUMBER,
    ("noise", "per_block"): list,
    ("train", "epochs"): int,
    ("train", "lr"): _NUMBER,
    ("train", "milestones"): list,
    ("train", "momentum"): _NUMBER,
    ("train", "batch"): int,
    ("train", "seed"): int,
    ("train", "gamma_init"): _NUMBER,
    ("train", "weight_decay"): _NUMBER,
    ("eval", "n_way"): int,
    ("eval", "k_shot"): int,
    ("eval", "m_query"): int,
    ("eval", "episodes"): int,
    ("eval", "seed"): int,
}


class ConfigError(ValueError):
    pass


def _check_type(path: str, value, expected) -> None:
    ok = isinstance(value, expected)
    if expected is int or expected == _NUMBER:
        ok = ok and not isinstance(value, bool)
    if not ok:
        raise ConfigError(f"{path}: expected {getattr(expected, '__name__', 'number')}, got {value!r}")


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys raise ConfigError."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            out[key] = merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(cfg: dict) -> dict:
    for (section, key), expected in _TYPES.items():
        _check_type(f"{section}.{key}", cfg[section][key], expected)
    m, n = cfg["model"], cfg["noise"]
    if m["blocks"] < 1:
        raise ConfigError("model.blocks: must be >= 1")
    if len(m["channels"]) != m["blocks"] + 1:
        raise ConfigError(f"model.channels: need blocks + 1 = {m['blocks'] + 1} entries (stem first)")
    if len(n["per_block"]) != m["blocks"]:
        raise ConfigError(f"noise.per_block: need {m['blocks']} entries")
    if m["pool_mode"] not in ("max", "avg"):
        raise ConfigError("model.pool_mode: must be 'max' or 'avg'")
    if n["kind"] not in ("none", "gaussian", "dropout"):
        raise ConfigError("noise.kind: must be 'none', 'gaussian' or 'dropout'")
    if not 0 < n["p_drop"] < 1:
        raise ConfigError("noise.p_drop: must lie in (0, 1)")
    if n["sigma"] < 0:
        raise ConfigError("noise.sigma: must be >= 0")
    if cfg["train"]["epochs"] < 1:
        raise ConfigError("train.epochs: must be >= 1")
    if not cfg["train"]["lr"] > 0:
        raise ConfigError("train.lr: must be > 0")
    return cfg


def make_config(override: Optional[dict] = None) -> dict:
    """Defaults with ``override`` merged in, validated."""
    return validate(merge(DEFAULTS, override or {}))


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return make_config(doc)


def dumps(cfg: dict) -> str:
    return canonical_json(cfg).decode("utf-8")


def set_path(cfg: dict, dotted: str, value: Any) -> dict:
    """Copy of ``cfg`` with ``section.key`` replaced."""
    section, _, key = dotted.partition(".")
    return make_config(merge(cfg, {section: {key: value}}))


def noise_specs(cfg: dict) -> list:
    n = cfg["noise"]
    active = NoiseSpec(n["kind"], n["spatial"], float(n["sigma"]), float(n["p_drop"]))
    return [active if on else NO_NOISE for on in n["per_block"]]


def build_model(cfg: dict, in_channels: int, num_classes: int) -> SdnnModel:
    m, t = cfg["model"], cfg["train"]
    heads = [m["aux"]] * (m["blocks"] - 1) + [True]
    blocks = default_blocks(m["channels"], m["convs_per_block"], noise_specs(cfg), heads)
    return SdnnModel(in_channels, num_classes, blocks, m["channels"][0], m["embed_dim"],
                     (m["pool_target"], m["pool_target"]), m["pool_mode"], float(t["gamma_init"]), t["seed"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], lr=float(t["lr"]), milestones=tuple(t["milestones"]),
                       momentum=float(t["momentum"]), weight_decay=float(t["weight_decay"]),
                       batch_size=t["batch"], seed=t["seed"])


def episode_spec(cfg: dict, **override) -> EpisodeSpec:
    e = dict(cfg["eval"])
    e.update({k: v for k, v in override.items() if v is not None})
    return EpisodeSpec(e["n_way"], e["k_shot"], e["m_query"], e["episodes"], e["seed"])
