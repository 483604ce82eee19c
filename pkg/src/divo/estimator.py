"""scikit-learn style front ends.

``DIVO`` wraps the full training loop, ``DiffusionBehaviorModel`` the
advantage-weighted diffusion model on its own, and ``BehaviorCloning`` the
plain regression baseline. All expose ``get_params``/``set_params`` through
:class:`sklearn.base.BaseEstimator`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .approximator import AdamState, adam_step, seed_streams
from .dataset import OfflineDataset, load
from .diffusion import DiffusionPolicy, NoiseSchedule, sample_action, weighted_denoising_loss
from .envs import make_env, normalized_score
from .exceptions import ConfigurationError
from .trainer import DIVOTrainer, TrainConfig, train_behavior_cloning


def _as_dataset(X) -> OfflineDataset:
    if isinstance(X, OfflineDataset):
        return X
    if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        return load(X)
    raise ConfigurationError("X must be an OfflineDataset or a path to a dataset file")


class DIVO(BaseEstimator):
    """Offline RL estimator: ``fit`` on a transition dataset, ``predict`` actions.

    Constructor arguments mirror :class:`TrainConfig`; ``env`` names the
    registered environment used for periodic evaluation.
    """

    def __init__(
        self,
        env="PointMass2D",
        total_iterations=50_000,
        batch_size=256,
        lr_policy=3e-4,
        lr_q=3e-4,
        lr_value=3e-4,
        lr_diffusion=3e-4,
        tau=5e-3,
        gamma=0.99,
        policy_noise=0.2,
        noise_clip=(-0.5, 0.5),
        policy_update_freq=2,
        alpha=2.5,
        beta_reg=0.4,
        eta=1.0,
        K=5,
        eval_interval=1000,
        eval_episodes=10,
        seed=0,
        hidden_dim=256,
        num_layers=3,
        expectile=0.5,
        normalize_states=True,
        grad_clip_norm=0.0,
        dtype="float32",
    ):
        self.env = env
        self.total_iterations = total_iterations
        self.batch_size = batch_size
        self.lr_policy = lr_policy
        self.lr_q = lr_q
        self.lr_value = lr_value
        self.lr_diffusion = lr_diffusion
        self.tau = tau
        self.gamma = gamma
        self.policy_noise = policy_noise
        self.noise_clip = noise_clip
        self.policy_update_freq = policy_update_freq
        self.alpha = alpha
        self.beta_reg = beta_reg
        self.eta = eta
        self.K = K
        self.eval_interval = eval_interval
        self.eval_episodes = eval_episodes
        self.seed = seed
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.expectile = expectile
        self.normalize_states = normalize_states
        self.grad_clip_norm = grad_clip_norm
        self.dtype = dtype

    def to_config(self) -> TrainConfig:
        params = self.get_params()
        params.pop("env")
        return TrainConfig(**params)

    def fit(self, X, y=None):
        """Train on ``X`` (an :class:`OfflineDataset` or dataset path)."""
        dataset = _as_dataset(X)
        self.trainer_ = DIVOTrainer(self.to_config(), dataset, self.env)
        self.trainer_.run()
        self.metrics_ = self.trainer_.metrics
        self.n_features_in_ = dataset.state_dim
        return self

    @classmethod
    def from_checkpoint(cls, path, dataset) -> "DIVO":
        trainer = DIVOTrainer.load_checkpoint(path, _as_dataset(dataset))
        est = cls(env=trainer.env.spec.id, **dataclass_params(trainer.config))
        est.trainer_ = trainer
        est.metrics_ = trainer.metrics
        est.n_features_in_ = trainer.dataset.state_dim
        return est

    def predict(self, X):
        """Deterministic actions for raw environment states."""
        check_is_fitted(self, "trainer_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ConfigurationError(f"expected {self.n_features_in_} state features, got {X.shape[1]}")
        data = self.trainer_.dataset
        if data.normalized:
            X = data.normalize_state(X)
        return self.trainer_.policy(X).astype(np.float64)

    def score(self, X=None, y=None, episodes=None, seed=0):
        """Normalized score of the current policy on ``self.env``."""
        check_is_fitted(self, "trainer_")
        ret, _ = self.trainer_.evaluate(episodes or self.eval_episodes, np.random.default_rng(seed))
        return float(normalized_score(self.env, ret))


def dataclass_params(config: TrainConfig) -> dict:
    import dataclasses

    return {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}


class DiffusionBehaviorModel(BaseEstimator):
    """Conditional diffusion model of ``a | s`` trained by weighted denoising.

    ``sample_weight`` plays the role of the binary advantage weight: pass
    ``pad_weights(advantages, eta)`` for advantage-filtered cloning, or
    nothing for plain (unweighted) cloning.
    """

    def __init__(
        self,
        K=5,
        hidden_dim=256,
        num_layers=3,
        n_iterations=5000,
        batch_size=256,
        learning_rate=3e-4,
        dtype="float32",
        random_state=0,
    ):
        self.K = K
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if len(X) != len(y):
            raise ConfigurationError("X and y have different lengths")
        w = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        if w.shape != (len(X),) or np.any(w < 0):
            raise ConfigurationError("sample_weight must be non-negative with one entry per row")
        rngs = seed_streams(self.random_state, ("init", "batch", "noise"))
        self.policy_ = DiffusionPolicy(
            X.shape[1], y.shape[1], NoiseSchedule.variance_preserving(self.K),
            self.hidden_dim, self.num_layers, rng=rngs["init"], dtype=np.dtype(self.dtype),
        )
        opt = AdamState.zeros(self.policy_.spec.num_params, self.learning_rate, np.dtype(self.dtype))
        batch = min(self.batch_size, len(X))
        losses = []
        for _ in range(self.n_iterations):
            idx = rngs["batch"].integers(0, len(X), size=batch)
            loss, grad = weighted_denoising_loss(self.policy_, X[idx], y[idx], w[idx], rngs["noise"])
            adam_step(opt, self.policy_.params, grad)
            losses.append(loss)
        self.loss_curve_ = np.array(losses)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, X, random_state=None):
        """One action per row of ``X``, clipped to ``[-1, 1]``."""
        check_is_fitted(self, "policy_")
        X = check_array(X, dtype=np.float64)
        rng = random_state if isinstance(random_state, np.random.Generator) else np.random.default_rng(random_state)
        return sample_action(self.policy_, X, rng)


class BehaviorCloning(BaseEstimator):
    """The actor network regressed onto dataset actions (MSE); a baseline."""

    def __init__(self, env="PointMass2D", total_iterations=50_000, batch_size=256, lr_policy=3e-4,
                 eval_interval=1000, eval_episodes=10, seed=0, hidden_dim=256, num_layers=3,
                 normalize_states=True, dtype="float32"):
        self.env = env
        self.total_iterations = total_iterations
        self.batch_size = batch_size
        self.lr_policy = lr_policy
        self.eval_interval = eval_interval
        self.eval_episodes = eval_episodes
        self.seed = seed
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.normalize_states = normalize_states
        self.dtype = dtype

    def fit(self, X, y=None):
        dataset = _as_dataset(X)
        params = self.get_params()
        params.pop("env")
        config = TrainConfig(**params)
        self.actor_, self.metrics_ = train_behavior_cloning(config, dataset, self.env)
        make_env(self.env)
        if config.normalize_states:
            self.state_mean_ = dataset.states.mean(axis=0) if not dataset.normalized else dataset.state_mean
            self.state_std_ = (
                np.maximum(dataset.states.std(axis=0), 1e-3) if not dataset.normalized else dataset.state_std
            )
        self.n_features_in_ = dataset.state_dim
        return self

    def predict(self, X):
        check_is_fitted(self, "actor_")
        X = check_array(X, dtype=np.float64)
        if self.normalize_states:
            X = (X - self.state_mean_) / self.state_std_
        return self.actor_.act(X).astype(np.float64)
