"""Conditional few-step DDPM over actions, and its advantage-weighted loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .approximator import (
    DTYPE,
    MlpSpec,
    ParamVector,
    backward_cached,
    forward_cached,
    init_params,
)
from .exceptions import ConfigurationError, NumericError

TIMESTEP_EMBED_DIM = 16


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants, stored 0-based: ``beta[k - 1]`` is the k-th step."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def K(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=DTYPE)
        if beta.ndim != 1 or len(beta) < 1:
            raise ConfigurationError("beta must be a non-empty 1-d array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigurationError("every beta must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))

    @classmethod
    def variance_preserving(
        cls, K: int = 5, beta_min: float = 0.1, beta_max: float = 10.0
    ) -> "NoiseSchedule":
        """Discretized VP-SDE schedule that stays well spread for small K."""
        if K < 1:
            raise ConfigurationError("K must be >= 1")
        k = np.arange(1, K + 1, dtype=DTYPE)
        beta = 1.0 - np.exp(-beta_min / K - (beta_max - beta_min) * (2 * k - 1) / (2 * K**2))
        return cls.from_betas(beta)

    def _check_step(self, k) -> None:
        k = np.asarray(k)
        if np.any(k < 1) or np.any(k > self.K):
            raise IndexError(f"diffusion step out of range 1..{self.K}: {k}")


def timestep_embedding(k, dim: int = TIMESTEP_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer steps, shape ``(len(k), dim)``."""
    k = np.atleast_1d(np.asarray(k, dtype=DTYPE))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=DTYPE) / half)
    args = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def forward_perturb(schedule: NoiseSchedule, a0, k, eps) -> np.ndarray:
    """Noisy action ``sqrt(abar_k) a0 + sqrt(1 - abar_k) eps``; ``k`` is 1-based.

    ``k`` may be a scalar or one step per row of ``a0``.
    """
    schedule._check_step(k)
    a0 = np.asarray(a0, dtype=DTYPE)
    ab = schedule.alpha_bar[np.asarray(k) - 1]
    if np.ndim(ab) == 1 and a0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=DTYPE)


class DiffusionPolicy:
    """Noise predictor ``eps(a_k, k; s)`` together with its schedule."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        schedule: Optional[NoiseSchedule] = None,
        hidden_dim: int = 256,
        num_layers: int = 3,
        params: Optional[ParamVector] = None,
        rng: Optional[np.random.Generator] = None,
        dtype=DTYPE,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.schedule = schedule if schedule is not None else NoiseSchedule.variance_preserving()
        self.spec = MlpSpec(
            input_dim=state_dim + action_dim + TIMESTEP_EMBED_DIM,
            output_dim=action_dim,
            hidden_dim=hidden_dim,
            num_layers=num_layers,
        )
        if params is None:
            params = init_params(self.spec, rng if rng is not None else np.random.default_rng(0), dtype)
        self.params = params
        self._embed_table = timestep_embedding(np.arange(1, self.schedule.K + 1))

    def _net_input(self, noisy_action, k, states) -> np.ndarray:
        states = np.asarray(states, dtype=DTYPE)
        if states.ndim == 1:
            states = states[None, :]
        if states.shape[1] != self.state_dim:
            raise ConfigurationError(
                f"state has width {states.shape[1]}, expected {self.state_dim}"
            )
        n = states.shape[0]
        k = np.broadcast_to(np.asarray(k), (n,))
        return np.concatenate(
            [states, np.asarray(noisy_action, dtype=DTYPE).reshape(n, -1), self._embed_table[k - 1]],
            axis=1,
        )

    def predict_noise(self, noisy_action, k, states) -> np.ndarray:
        out, _ = forward_cached(self.spec, self.params, self._net_input(noisy_action, k, states))
        return out


def reverse_step(policy: DiffusionPolicy, a_k, k: int, states, z) -> np.ndarray:
    """One ancestral sampling step ``a_k -> a_{k-1}``; pass ``z = 0`` at ``k = 1``."""
    sched = policy.schedule
    sched._check_step(k)
    eps = policy.predict_noise(a_k, k, states)
    if not np.all(np.isfinite(eps)):
        raise NumericError(f"noise prediction is non-finite at diffusion step {k}")
    alpha, beta, ab = sched.alpha[k - 1], sched.beta[k - 1], sched.alpha_bar[k - 1]
    mean = (np.asarray(a_k, dtype=DTYPE) - (beta / np.sqrt(1.0 - ab)) * eps) / np.sqrt(alpha)
    return mean + np.sqrt(beta) * np.asarray(z, dtype=DTYPE)


def sample_action(policy: DiffusionPolicy, states, rng: np.random.Generator, clip: bool = True):
    """Draw one action per state by running the reverse chain from ``N(0, I)``.

    With ``clip=False`` the raw chain output is returned (used by variance checks).
    """
    states = np.asarray(states, dtype=DTYPE)
    if states.ndim == 1:
        states = states[None, :]
    n = states.shape[0]
    a = rng.standard_normal((n, policy.action_dim))
    for k in range(policy.schedule.K, 0, -1):
        z = rng.standard_normal(a.shape) if k > 1 else 0.0
        a = reverse_step(policy, a, k, states, z)
    return np.clip(a, -1.0, 1.0) if clip else a


def pad_weights(advantages, eta: float) -> np.ndarray:
    """Binary advantage weights: ``eta`` where ``A >= 0``, else 0."""
    if eta <= 0:
        raise ConfigurationError(f"eta must be positive, got {eta}")
    return np.where(np.asarray(advantages) >= 0.0, eta, 0.0)


def weighted_denoising_loss(
    policy: DiffusionPolicy,
    states,
    actions,
    weights,
    rng: Optional[np.random.Generator] = None,
    steps=None,
    noise=None,
):
    """Mean over the batch of ``w * ||eps - eps_hat(m_k, k; s)||^2`` and its gradient.

    ``steps`` (1-based) and ``noise`` may be supplied to freeze the randomness;
    otherwise one step and one noise vector are drawn per sample from ``rng``.
    """
    actions = np.asarray(actions, dtype=DTYPE)
    n = actions.shape[0]
    if n == 0:
        raise ConfigurationError("batch must be nonempty")
    weights = np.asarray(weights, dtype=DTYPE).reshape(n)
    if steps is None:
        steps = rng.integers(1, policy.schedule.K + 1, size=n)
    if noise is None:
        noise = rng.standard_normal(actions.shape)
    if not weights.any():
        return 0.0, np.zeros_like(policy.params)

    noisy = forward_perturb(policy.schedule, actions, steps, noise)
    pred, acts = forward_cached(policy.spec, policy.params, policy._net_input(noisy, steps, states))
    resid = noise - pred
    loss = float(np.mean(weights * np.sum(resid * resid, axis=1)))
    out_grad = (-2.0 / n) * weights[:, None] * resid
    grad, _ = backward_cached(policy.spec, policy.params, acts, out_grad)
    return loss, grad


def pad_loss(policy: DiffusionPolicy, states, actions, critics, value_fn, eta: float, rng, **frozen):
    """Advantage-gated denoising loss; the critics only supply constant weights."""
    from .critics import advantage

    weights = pad_weights(advantage(critics, value_fn, states, actions), eta)
    return weighted_denoising_loss(policy, states, actions, weights, rng, **frozen)
