"""Directed (signed cosine) divided space-time attention for video, in numpy.

Submodules: ``tensor`` (reverse-mode autodiff), ``model``, ``losses``,
``permutations``, ``order`` (Hamilton-path order recovery), ``synth``
(DirectedMotion data), ``training`` and ``cli``.
"""
from .losses import LossWeights, self_supervised_guided, total_loss
from .model import AttentionTrace, ConfigError, DirecFormer, ModelConfig, load_checkpoint, save_checkpoint
from .order import RANDOM_BASELINE_T8, order_accuracy, random_orderacc_baseline, recover_order
from .permutations import PermutationSet, generate_permutation_set
from .synth import DatasetSpec, generate_dataset
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AttentionTrace", "ConfigError", "DatasetSpec", "DirecFormer", "LossWeights", "ModelConfig",
    "PermutationSet", "RANDOM_BASELINE_T8", "TrainConfig", "evaluate", "generate_dataset",
    "generate_permutation_set", "load_checkpoint", "order_accuracy", "random_orderacc_baseline",
    "recover_order", "save_checkpoint", "self_supervised_guided", "total_loss", "train",
]
