"""Self-denoising networks for few-shot classification on a small numpy autodiff engine."""

from .config import ConfigError, build_model, load_config, make_config
from .data import FewShotDataset, SynthSpec, load_fsds, synth_generate, write_fsds
from .estimator import SDNNClassifier
from .fewshot import EpisodeSpec, EvalReport, evaluate
from .heads import CosineHead, average_predictions, imprint_weights
from .model import SdnnModel, TrainConfig, fit, forward_eval, forward_train, load_checkpoint, save_checkpoint
from .noise import NoiseSpec, Rng, apply_noise
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "build_model", "load_config", "make_config",
    "FewShotDataset", "SynthSpec", "load_fsds", "synth_generate", "write_fsds",
    "SDNNClassifier",
    "EpisodeSpec", "EvalReport", "evaluate",
    "CosineHead", "average_predictions", "imprint_weights",
    "SdnnModel", "TrainConfig", "fit", "forward_eval", "forward_train", "load_checkpoint", "save_checkpoint",
    "NoiseSpec", "Rng", "apply_noise",
    "Tensor", "backward", "grad_check",
]
