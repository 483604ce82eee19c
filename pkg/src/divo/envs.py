"""Toy continuous-control tasks with known optimal behaviour."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigurationError, UsageError


@dataclass(frozen=True)
class EnvSpec:
    id: str
    state_dim: int
    action_dim: int
    horizon: int
    reward_range: tuple
    optimal_return: float
    # Anchors for normalized scores: mean returns of the scripted random and
    # expert policies (1000 episodes, seed 0; see `compute_anchor_returns`).
    random_return: float
    expert_return: float

    def __post_init__(self):
        lo, hi = self.reward_range
        if not lo * self.horizon <= self.optimal_return <= hi * self.horizon:
            raise ConfigurationError(f"{self.id}: optimal return outside reward_range * horizon")


class Env:
    spec: EnvSpec

    def __init__(self):
        self._state = None
        self._t = 0
        self._done = True
        self.terminal = False

    @property
    def step_count(self) -> int:
        return self._t

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._state = self._initial_state(rng)
        self._t = 0
        self._done = False
        self.terminal = False
        return self._state.copy()

    def step(self, action):
        """Advance one step. ``done`` covers both termination and the time limit;
        ``self.terminal`` tells the two apart."""
        if self._done:
            raise UsageError(f"{self.spec.id}: step() called on a finished episode; call reset()")
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim), -1.0, 1.0)
        self._state, reward, self.terminal = self._transition(self._state, action)
        self._t += 1
        self._done = self.terminal or self._t >= self.spec.horizon
        return self._state.copy(), float(reward), self._done

    def _initial_state(self, rng):
        raise NotImplementedError

    def _transition(self, state, action):
        raise NotImplementedError

    def expert_action(self, obs, rng) -> np.ndarray:
        raise NotImplementedError

    def mediocre_action(self, obs, rng) -> np.ndarray:
        """Half-scaled expert action under heavy Gaussian noise."""
        a = 0.5 * self.expert_action(obs, rng) + rng.normal(0.0, 0.5, self.spec.action_dim)
        return np.clip(a, -1.0, 1.0)

    def random_action(self, obs, rng) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, self.spec.action_dim)


class PointMass2D(Env):
    """A point pushed toward a goal; reward is minus the distance to it."""

    goal = np.array([0.7, 0.7])
    step_size = 0.1
    goal_radius = 0.05
    start_half_width = 0.1

    spec = EnvSpec(
        id="PointMass2D",
        state_dim=2,
        action_dim=2,
        horizon=50,
        reward_range=(-8.5, 0.0),
        optimal_return=-2.1 * np.sqrt(2.0),
        random_return=-51.87823569629788,
        expert_return=-3.0473213998523088,
    )

    def _initial_state(self, rng):
        return rng.uniform(-self.start_half_width, self.start_half_width, 2)

    def _transition(self, state, action):
        nxt = state + self.step_size * action
        dist = float(np.linalg.norm(nxt - self.goal))
        return nxt, -dist, dist <= self.goal_radius

    def expert_action(self, obs, rng=None):
        return np.clip((self.goal - np.asarray(obs)) / self.step_size, -1.0, 1.0)


class TwoModeBandit(Env):
    """One-step task with a high-reward mode at +0.8 and a weaker one at -0.8."""

    high_mode = 0.8
    low_mode = -0.8
    expert_noise = 0.05

    spec = EnvSpec(
        id="TwoModeBandit",
        state_dim=1,
        action_dim=1,
        horizon=1,
        reward_range=(0.0, 1.0 + 0.4 * np.exp(-128.0)),
        optimal_return=1.0 + 0.4 * np.exp(-128.0),
        random_return=0.1716783273850051,
        expert_return=0.9595053844236319,
    )

    @staticmethod
    def reward(a):
        a = np.asarray(a, dtype=np.float64)
        return 1.0 * np.exp(-((a - 0.8) ** 2) / 0.02) + 0.4 * np.exp(-((a + 0.8) ** 2) / 0.02)

    def _initial_state(self, rng):
        return np.zeros(1)

    def _transition(self, state, action):
        return state.copy(), float(self.reward(action[0])), True

    def expert_action(self, obs, rng):
        return np.array([self.high_mode + rng.uniform(-self.expert_noise, self.expert_noise)])

    def mediocre_action(self, obs, rng):
        # The weaker mode: keeps the action distribution genuinely bimodal.
        return np.array([self.low_mode + rng.uniform(-self.expert_noise, self.expert_noise)])


REGISTRY = {cls.spec.id: cls for cls in (PointMass2D, TwoModeBandit)}


def make_env(env_id: str) -> Env:
    try:
        return REGISTRY[env_id]()
    except KeyError:
        raise ConfigurationError(
            f"unknown environment {env_id!r}; registered: {sorted(REGISTRY)}"
        ) from None


def normalized_score(env_id: str, ret) -> np.ndarray:
    """``100 (R - R_random) / (R_expert - R_random)`` with the registered anchors."""
    spec = make_env(env_id).spec
    return 100.0 * (np.asarray(ret) - spec.random_return) / (spec.expert_return - spec.random_return)


def evaluate_policy(
    env: Env,
    policy: Callable[[np.ndarray], np.ndarray],
    episodes: int,
    rng: np.random.Generator,
    state_mean: Optional[np.ndarray] = None,
    state_std: Optional[np.ndarray] = None,
    normalized: bool = False,
):
    """Undiscounted return statistics of a deterministic policy.

    Episodes run in lockstep so that ``policy`` sees one batch of observations
    per time step. Observations are standardized with the dataset statistics
    when the training data was normalized. Returns ``(mean, std)``.
    """
    if episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    if normalized and (state_mean is None or state_std is None):
        raise UsageError("policy was trained on normalized states but no statistics were given")
    envs = [type(env)() for _ in range(episodes)]
    obs = np.stack([e.reset(rng) for e in envs])
    returns = np.zeros(episodes)
    active = np.ones(episodes, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        x = obs[idx]
        if normalized:
            x = (x - state_mean) / state_std
        actions = np.asarray(policy(x)).reshape(len(idx), env.spec.action_dim)
        for j, i in enumerate(idx):
            obs[i], r, done = envs[i].step(actions[j])
            returns[i] += r
            active[i] = not done
    return float(returns.mean()), float(returns.std())


def compute_anchor_returns(env_id: str, episodes: int = 1000, seed: int = 0):
    """Mean returns of the scripted random and expert policies."""
    env = make_env(env_id)
    out = {}
    for kind in ("random", "expert"):
        rng = np.random.default_rng(seed)
        act_rng = np.random.default_rng(seed + 1)
        act = getattr(env, f"{kind}_action")
        policy = lambda x: np.stack([act(o, act_rng) for o in x])  # noqa: E731
        out[kind] = evaluate_policy(env, policy, episodes, rng)[0]
    return out
