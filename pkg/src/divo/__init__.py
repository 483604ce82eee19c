"""Offline RL with an advantage-filtered diffusion behavior model and a gated actor."""

from .actor import Actor, lambda_coefficient, policy_loss, select_target_action
from .approximator import AdamState, MlpSpec, adam_step, polyak_update, seed_streams
from .critics import CriticPair, ValueFn, advantage, td_loss, value_loss
from .dataset import GeneratorSpec, OfflineDataset, generate_dataset, load, sample_batch, save
from .diffusion import (
    DiffusionPolicy,
    NoiseSchedule,
    forward_perturb,
    pad_loss,
    pad_weights,
    reverse_step,
    sample_action,
)
from .envs import PointMass2D, TwoModeBandit, evaluate_policy, make_env, normalized_score
from .estimator import DIVO, BehaviorCloning, DiffusionBehaviorModel
from .exceptions import (
    ConfigurationError,
    DivoError,
    FormatError,
    NumericError,
    TrainingDivergenceError,
    UsageError,
)
from .trainer import DIVOTrainer, RunMetrics, TrainConfig, train, train_behavior_cloning

__version__ = "0.1.0"

__all__ = [
    "Actor", "AdamState", "BehaviorCloning", "ConfigurationError", "CriticPair", "DIVO",
    "DIVOTrainer", "DiffusionBehaviorModel", "DiffusionPolicy", "DivoError", "FormatError",
    "GeneratorSpec", "MlpSpec", "NoiseSchedule", "NumericError", "OfflineDataset", "PointMass2D",
    "RunMetrics", "TrainConfig", "TrainingDivergenceError", "TwoModeBandit", "UsageError",
    "ValueFn", "adam_step", "advantage", "evaluate_policy", "forward_perturb", "generate_dataset",
    "lambda_coefficient", "load", "make_env", "normalized_score", "pad_loss", "pad_weights",
    "policy_loss", "polyak_update", "reverse_step", "sample_action", "sample_batch", "save",
    "seed_streams", "select_target_action", "td_loss", "train", "train_behavior_cloning",
    "value_loss",
]
