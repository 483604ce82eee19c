"""Deterministic actor and advantage-gated policy extraction."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .approximator import DTYPE, MlpSpec, backward_cached, forward, forward_cached, init_params
from .critics import CriticPair, ValueFn, advantage
from .diffusion import DiffusionPolicy, sample_action
from .exceptions import ConfigurationError

LAMBDA_FLOOR = 1e-8


class Actor:
    """Tanh-headed MLP ``pi(s)`` with a Polyak-averaged target copy."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        alpha: float = 2.5,
        beta_reg: float = 0.4,
        policy_update_freq: int = 2,
        hidden_dim: int = 256,
        num_layers: int = 3,
        rng: Optional[np.random.Generator] = None,
        dtype=DTYPE,
    ):
        if alpha <= 0 or beta_reg < 0:
            raise ConfigurationError("alpha must be positive and beta_reg non-negative")
        if policy_update_freq < 1:
            raise ConfigurationError("policy_update_freq must be >= 1")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.alpha = alpha
        self.beta_reg = beta_reg
        self.policy_update_freq = policy_update_freq
        self.spec = MlpSpec(state_dim, action_dim, hidden_dim, num_layers, final_activation="tanh")
        self.theta = init_params(self.spec, rng if rng is not None else np.random.default_rng(0), dtype)
        self.theta_target = self.theta.copy()

    def act(self, states, target: bool = False) -> np.ndarray:
        params = self.theta_target if target else self.theta
        return forward(self.spec, params, np.atleast_2d(np.asarray(states, dtype=DTYPE)))


def select_target_action(
    diffusion_policy: DiffusionPolicy,
    critics: CriticPair,
    value_fn: ValueFn,
    actor: Actor,
    states,
    rng: np.random.Generator,
    actor_actions=None,
):
    """Per-state regularization target.

    A diffusion sample is kept where its advantage is non-negative; elsewhere
    the actor's own (frozen) action is used. ``actor_actions`` may pass in
    ``actor.act(states)`` if it is already known. Returns
    ``(targets, took_diffusion)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=DTYPE))
    sampled = sample_action(diffusion_policy, states, rng)
    keep = advantage(critics, value_fn, states, sampled) >= 0.0
    if keep.all():
        return sampled, keep
    if actor_actions is None:
        actor_actions = actor.act(states)
    return np.where(keep[:, None], sampled, actor_actions), keep


def lambda_coefficient(critics: CriticPair, actor: Actor, states, actions=None) -> float:
    """``alpha * B / sum |min Q(s, pi(s))|``, floored to avoid division by zero."""
    states = np.atleast_2d(np.asarray(states, dtype=DTYPE))
    if states.shape[0] == 0:
        raise ConfigurationError("batch must be nonempty")
    if actions is None:
        actions = actor.act(states)
    q = critics.min_q(states, actions)
    return actor.alpha * len(q) / max(float(np.sum(np.abs(q))), LAMBDA_FLOOR)


def policy_loss(
    actor: Actor,
    critics: CriticPair,
    target_actions,
    states,
    lam: Optional[float] = None,
    cached=None,
):
    """``mean(-lam * Q1(s, pi(s)) + beta * ||pi(s) - target||^2)`` and its gradient.

    ``lam`` defaults to :func:`lambda_coefficient` on the same states. Critic
    parameters and the targets are constants. ``cached`` may hold
    ``forward_cached(actor.spec, actor.theta, states)``. Returns
    ``(loss, grad, lam)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=DTYPE))
    n = states.shape[0]
    if n == 0:
        raise ConfigurationError("batch must be nonempty")
    pi, acts = cached if cached is not None else forward_cached(actor.spec, actor.theta, states)
    sa = critics._sa(states, pi)
    q1, q_acts = forward_cached(critics.spec, critics.q1, sa)
    if lam is None:
        q2 = forward(critics.spec, critics.q2, sa)
        q_min = np.minimum(q1, q2)[:, 0]
        lam = actor.alpha * n / max(float(np.sum(np.abs(q_min))), LAMBDA_FLOOR)

    diff = pi - np.asarray(target_actions, dtype=DTYPE)
    loss = float(np.mean(-lam * q1[:, 0] + actor.beta_reg * np.sum(diff * diff, axis=1)))

    _, dq_dsa = backward_cached(
        critics.spec, critics.q1, q_acts, np.full((n, 1), -lam / n),
        need_params=False, need_input=True,
    )
    pi_grad = dq_dsa[:, actor.state_dim:] + (2.0 * actor.beta_reg / n) * diff
    grad, _ = backward_cached(actor.spec, actor.theta, acts, pi_grad)
    return loss, grad, lam
