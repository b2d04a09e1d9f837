"""Pretrain and evaluate from a run config; shared by the CLI and the ablation runner."""

from __future__ import annotations

from typing import Callable, List, Optional, Tuple

from .config import build_model, episode_spec, train_config
from .data import FewShotDataset, normalize_batch
from .fewshot import EvalReport, evaluate
from .model import SdnnModel, fit


def base_training_set(ds: FewShotDataset):
    idx, y = ds.split_arrays("base")
    if idx.size == 0:
        raise ValueError("dataset has no base classes to pretrain on")
    return normalize_batch(ds, idx), y


def pretrain(cfg: dict, ds: FewShotDataset,
             on_epoch: Optional[Callable[[dict], None]] = None) -> Tuple[SdnnModel, List[dict]]:
    x, y = base_training_set(ds)
    model = build_model(cfg, ds.image_shape[2], len(ds.classes_in("base")))
    log = fit(model, x, y, train_config(cfg), on_epoch)
    return model, log


def evaluate_config(model: SdnnModel, ds: FewShotDataset, cfg: dict, split: str = "novel",
                    **override) -> EvalReport:
    """Episodic evaluation with the config's eval section, fields overridable by keyword."""
    return evaluate(model, ds, episode_spec(cfg, **override), split)
