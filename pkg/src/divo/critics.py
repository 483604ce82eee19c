"""Twin Q networks with targets, a state-value network, and the advantage."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .approximator import (
    DTYPE,
    MlpSpec,
    backward_cached,
    forward,
    forward_cached,
    init_params,
)
from .exceptions import ConfigurationError, NumericError


class CriticPair:
    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        gamma: float = 0.99,
        hidden_dim: int = 256,
        num_layers: int = 3,
        rng: Optional[np.random.Generator] = None,
        dtype=DTYPE,
    ):
        if not 0.0 <= gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.gamma = gamma
        self.spec = MlpSpec(state_dim + action_dim, 1, hidden_dim, num_layers)
        self.q1 = init_params(self.spec, rng, dtype)
        self.q2 = init_params(self.spec, rng, dtype)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()

    def _sa(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=DTYPE))
        actions = np.atleast_2d(np.asarray(actions, dtype=DTYPE))
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ConfigurationError(
                f"critic expects widths ({self.state_dim}, {self.action_dim}), "
                f"got ({states.shape[1]}, {actions.shape[1]})"
            )
        return np.concatenate([states, actions], axis=1)

    def q_values(self, states, actions, target: bool = False):
        """``(Q1, Q2)`` as 1-d arrays, from the online or target parameters."""
        sa = self._sa(states, actions)
        p1, p2 = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        return forward(self.spec, p1, sa)[:, 0], forward(self.spec, p2, sa)[:, 0]

    def min_q(self, states, actions, target: bool = False) -> np.ndarray:
        return np.minimum(*self.q_values(states, actions, target))


class ValueFn:
    """State-value network ``V(s)`` regressed onto ``min(Q1, Q2)``.

    ``expectile`` controls the asymmetric squared loss; 0.5 is plain MSE.
    """

    def __init__(
        self,
        state_dim: int,
        hidden_dim: int = 256,
        num_layers: int = 3,
        expectile: float = 0.5,
        rng: Optional[np.random.Generator] = None,
        dtype=DTYPE,
    ):
        if not 0.0 < expectile < 1.0:
            raise ConfigurationError(f"expectile must lie in (0, 1), got {expectile}")
        self.state_dim = state_dim
        self.expectile = expectile
        self.spec = MlpSpec(state_dim, 1, hidden_dim, num_layers)
        self.params = init_params(self.spec, rng if rng is not None else np.random.default_rng(0), dtype)

    def __call__(self, states) -> np.ndarray:
        return forward(self.spec, self.params, np.atleast_2d(states))[:, 0]


def advantage(critics: CriticPair, value_fn: ValueFn, states, actions) -> np.ndarray:
    """``min(Q1, Q2)(s, a) - V(s)`` with the online networks."""
    return critics.min_q(states, actions) - value_fn(states)


def td_targets(critics: CriticPair, actor, next_states, rewards, dones, policy_noise, noise_clip, rng):
    """Clipped double-Q targets with target-policy smoothing."""
    next_states = np.atleast_2d(np.asarray(next_states, dtype=DTYPE))
    next_actions = actor.act(next_states, target=True)
    noise = rng.standard_normal(next_actions.shape) * policy_noise
    noise = np.clip(noise, noise_clip[0], noise_clip[1])
    next_actions = np.clip(next_actions + noise, -1.0, 1.0)
    next_q = critics.min_q(next_states, next_actions, target=True)
    y = np.asarray(rewards, dtype=DTYPE) + critics.gamma * (1.0 - np.asarray(dones, dtype=DTYPE)) * next_q
    bad = ~np.isfinite(y)
    if bad.any():
        raise NumericError(f"non-finite TD target at batch index {int(np.flatnonzero(bad)[0])}")
    return y


def online_forward(critics: CriticPair, states, actions):
    """Cached online forward passes ``((Q1, acts1), (Q2, acts2))`` for reuse."""
    sa = critics._sa(states, actions)
    return forward_cached(critics.spec, critics.q1, sa), forward_cached(critics.spec, critics.q2, sa)


def td_loss(
    critics: CriticPair,
    actor,
    batch,
    policy_noise: float = 0.2,
    noise_clip=(-0.5, 0.5),
    rng=None,
    online=None,
):
    """Twin TD regression loss. Returns ``(loss, grad_q1, grad_q2)``.

    The targets are computed once and treated as constants. ``online`` may
    carry the result of :func:`online_forward` on ``(batch.states,
    batch.actions)`` under the current parameters.
    """
    if policy_noise < 0:
        raise ConfigurationError("policy_noise must be non-negative")
    n = len(batch.rewards)
    if n == 0:
        raise ConfigurationError("batch must be nonempty")
    y = td_targets(
        critics, actor, batch.next_states, batch.rewards, batch.dones, policy_noise, noise_clip, rng
    )
    if online is None:
        online = online_forward(critics, batch.states, batch.actions)
    (q1, acts1), (q2, acts2) = online
    d1 = q1[:, 0] - y
    d2 = q2[:, 0] - y
    loss = float(np.mean(d1 * d1 + d2 * d2))
    g1, _ = backward_cached(critics.spec, critics.q1, acts1, (2.0 / n) * d1[:, None])
    g2, _ = backward_cached(critics.spec, critics.q2, acts2, (2.0 / n) * d2[:, None])
    return loss, g1, g2


def value_loss(value_fn: ValueFn, critics: CriticPair, states, actions, cached=None):
    """Regression of ``V(s)`` onto the frozen ``min(Q1, Q2)(s, a)``.

    The asymmetric weight is ``2 |tau - 1(u < 0)|`` with ``u = target - V`` so
    that ``expectile = 0.5`` gives exactly the mean squared error. ``cached``
    may hold ``forward_cached(value_fn.spec, value_fn.params, states)``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=DTYPE))
    n = states.shape[0]
    if n == 0:
        raise ConfigurationError("batch must be nonempty")
    target = critics.min_q(states, actions)
    v, acts = cached if cached is not None else forward_cached(value_fn.spec, value_fn.params, states)
    u = target - v[:, 0]
    w = 2.0 * np.abs(value_fn.expectile - (u < 0.0))
    loss = float(np.mean(w * u * u))
    grad, _ = backward_cached(value_fn.spec, value_fn.params, acts, (-2.0 / n) * (w * u)[:, None])
    return loss, grad
