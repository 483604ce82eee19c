"""Offline transition datasets: container, normalization, sampling, file format
and scripted-policy generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .envs import Env, make_env
from .exceptions import ConfigurationError, FormatError, UsageError

STD_EPS = 1e-3
MAGIC = b"DIVO"
VERSION = 1
# magic, version, state_dim, action_dim, count, normalized
_HEADER = struct.Struct("<4sIIIQB")
POLICY_KINDS = ("expert", "mediocre", "random")


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


@dataclass
class OfflineDataset:
    """Column-stored transitions plus the state statistics used to normalize them."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    state_mean: Optional[np.ndarray] = None
    state_std: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        self.states = _as_rows(self.states)
        self.actions = _as_rows(self.actions)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.next_states = np.asarray(self.next_states, dtype=np.float64).reshape(self.states.shape)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        if self.states.shape[0] != self.actions.shape[0] or self.dones.shape != self.rewards.shape:
            raise ConfigurationError("transition columns have inconsistent lengths")
        if np.any(np.abs(self.actions) > 1.0):
            raise ConfigurationError("actions must lie in [-1, 1]")
        if self.state_mean is None:
            self.state_mean = np.zeros(self.state_dim)
            self.state_std = np.ones(self.state_dim)

    @classmethod
    def from_transitions(cls, transitions) -> "OfflineDataset":
        transitions = list(transitions)
        if not transitions:
            raise ConfigurationError("cannot build a dataset from zero transitions")
        cols = list(zip(*transitions))
        return cls(*(np.array(c) for c in cols))

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i) -> Transition:
        return Transition(
            self.states[i], self.actions[i], float(self.rewards[i]),
            self.next_states[i], bool(self.dones[i]),
        )

    def normalize_state(self, states) -> np.ndarray:
        """Apply the stored statistics to raw (e.g. environment) states."""
        return (np.asarray(states) - self.state_mean) / self.state_std


def normalize_states(dataset: OfflineDataset) -> OfflineDataset:
    """Standardize states and next states in place with population statistics."""
    if dataset.normalized:
        raise UsageError("dataset is already normalized")
    if len(dataset) == 0:
        raise UsageError("cannot normalize an empty dataset")
    mean = dataset.states.mean(axis=0)
    std = np.maximum(dataset.states.std(axis=0), STD_EPS)
    dataset.states = (dataset.states - mean) / std
    dataset.next_states = (dataset.next_states - mean) / std
    dataset.state_mean, dataset.state_std = mean, std
    dataset.normalized = True
    return dataset


def sample_batch(dataset: OfflineDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform minibatch, drawn with replacement."""
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot sample from an empty dataset")
    if not 1 <= batch_size <= n:
        raise ConfigurationError(f"batch_size must lie in [1, {n}], got {batch_size}")
    idx = rng.integers(0, n, size=batch_size)
    return Batch(
        dataset.states[idx], dataset.actions[idx], dataset.rewards[idx],
        dataset.next_states[idx], dataset.dones[idx].astype(np.float64),
    )


@dataclass
class GeneratorSpec:
    env_id: str
    mix: list = field(default_factory=lambda: [("expert", 0.5), ("random", 0.5)])
    episodes: int = 100
    seed: int = 0

    def __post_init__(self):
        total = 0.0
        for kind, frac in self.mix:
            if kind not in POLICY_KINDS:
                raise ConfigurationError(f"unknown policy kind {kind!r}; use one of {POLICY_KINDS}")
            if frac < 0:
                raise ConfigurationError("mixture fractions must be non-negative")
            total += frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"mixture fractions must sum to 1, got {total}")
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")

    @staticmethod
    def parse_mix(text: str) -> list:
        """Parse ``"expert:0.5,random:0.5"``."""
        mix = []
        for part in text.split(","):
            kind, _, frac = part.partition(":")
            try:
                mix.append((kind.strip(), float(frac)))
            except ValueError:
                raise ConfigurationError(f"bad mixture entry {part!r}") from None
        return mix

    def episode_counts(self) -> list:
        """Largest-remainder split of ``episodes`` over the mixture."""
        raw = [frac * self.episodes for _, frac in self.mix]
        counts = [int(np.floor(r)) for r in raw]
        order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
        for i in order[: self.episodes - sum(counts)]:
            counts[i] += 1
        return [(kind, c) for (kind, _), c in zip(self.mix, counts)]


def generate_dataset(spec: GeneratorSpec, env: Optional[Env] = None) -> OfflineDataset:
    """Roll out scripted policies in the proportions given by ``spec.mix``."""
    env = env if env is not None else make_env(spec.env_id)
    if env.spec.id != spec.env_id:
        raise ConfigurationError(f"generator is for {spec.env_id!r} but env is {env.spec.id!r}")
    rng = np.random.default_rng(spec.seed)
    transitions = []
    for kind, count in spec.episode_counts():
        act = getattr(env, f"{kind}_action")
        for _ in range(count):
            obs = env.reset(rng)
            done = False
            while not done:
                action = np.clip(act(obs, rng), -1.0, 1.0)
                nxt, reward, done = env.step(action)
                transitions.append(Transition(obs, action, reward, nxt, env.terminal))
                obs = nxt
    return OfflineDataset.from_transitions(transitions)


def record_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype([
        ("state", "<f8", (state_dim,)),
        ("action", "<f8", (action_dim,)),
        ("reward", "<f8"),
        ("next_state", "<f8", (state_dim,)),
        ("done", "u1"),
    ])


def save(dataset: OfflineDataset, path) -> None:
    n, ds, da = len(dataset), dataset.state_dim, dataset.action_dim
    records = np.empty(n, dtype=record_dtype(ds, da))
    records["state"] = dataset.states
    records["action"] = dataset.actions
    records["reward"] = dataset.rewards
    records["next_state"] = dataset.next_states
    records["done"] = dataset.dones
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, ds, da, n, int(dataset.normalized)))
        f.write(np.asarray(dataset.state_mean, dtype="<f8").tobytes())
        f.write(np.asarray(dataset.state_std, dtype="<f8").tobytes())
        f.write(records.tobytes())


def load(path) -> OfflineDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file is shorter than the header", offset=len(blob))
    magic, version, ds, da, n, normalized = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if normalized not in (0, 1):
        raise FormatError(f"bad normalized flag {normalized}", offset=_HEADER.size - 1)
    pos = _HEADER.size
    dtype = record_dtype(ds, da)
    expected = pos + 16 * ds + n * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"file has {len(blob)} bytes, header implies {expected}", offset=min(len(blob), expected)
        )
    mean = np.frombuffer(blob, "<f8", ds, pos).astype(np.float64)
    std = np.frombuffer(blob, "<f8", ds, pos + 8 * ds).astype(np.float64)
    records = np.frombuffer(blob, dtype, n, pos + 16 * ds)
    return OfflineDataset(
        states=records["state"].copy(),
        actions=records["action"].copy(),
        rewards=records["reward"].copy(),
        next_states=records["next_state"].copy(),
        dones=records["done"].astype(bool),
        state_mean=mean,
        state_std=std,
        normalized=bool(normalized),
    )


def file_size(state_dim: int, action_dim: int, count: int) -> int:
    return _HEADER.size + 16 * state_dim + count * record_dtype(state_dim, action_dim).itemsize
