"""Training loop, configuration, checkpoints and metrics files."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .actor import Actor, policy_loss, select_target_action
from .approximator import AdamState, adam_step, forward_cached, polyak_update, seed_streams
from .critics import CriticPair, ValueFn, online_forward, td_loss, value_loss
from .dataset import OfflineDataset, normalize_states, sample_batch
from .diffusion import DiffusionPolicy, NoiseSchedule, pad_weights, weighted_denoising_loss
from .envs import Env, evaluate_policy, make_env, normalized_score
from .exceptions import ConfigurationError, FormatError, NumericError, TrainingDivergenceError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DIVC"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")

METRICS_FIELDS = (
    "iteration",
    "eval_return",
    "normalized_score",
    "pad_loss",
    "td_loss",
    "value_loss",
    "policy_loss",
    "gate_diffusion_fraction",
    "lambda",
)
LAST_EVALS = 10
RNG_STREAMS = ("init", "batch", "diffusion", "td", "gate", "eval")


@dataclass
class TrainConfig:
    total_iterations: int = 50_000
    batch_size: int = 256
    lr_policy: float = 3e-4
    lr_q: float = 3e-4
    lr_value: float = 3e-4
    lr_diffusion: float = 3e-4
    tau: float = 5e-3
    gamma: float = 0.99
    policy_noise: float = 0.2
    noise_clip: tuple = (-0.5, 0.5)
    policy_update_freq: int = 2
    alpha: float = 2.5
    beta_reg: float = 0.4
    eta: float = 1.0
    K: int = 5
    eval_interval: int = 1000
    eval_episodes: int = 10
    seed: int = 0
    hidden_dim: int = 256
    num_layers: int = 3
    expectile: float = 0.5
    normalize_states: bool = True
    grad_clip_norm: float = 0.0
    # Network arithmetic; float64 is kept for gradient checks.
    dtype: str = "float32"

    def __post_init__(self):
        self.noise_clip = tuple(float(x) for x in self.noise_clip)
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name in ("lr_policy", "lr_q", "lr_value", "lr_diffusion", "eta", "alpha"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if len(self.noise_clip) != 2 or self.noise_clip[0] > self.noise_clip[1]:
            raise ConfigurationError("noise_clip must be an interval (lo, hi)")
        for name in ("total_iterations", "batch_size", "policy_update_freq", "K", "eval_interval",
                     "eval_episodes"):
            value = getattr(self, name)
            if int(value) != value or value < (0 if name == "total_iterations" else 1):
                raise ConfigurationError(f"{name} must be a positive integer")
            setattr(self, name, int(value))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigurationError(f"line {lineno}: expected 'key = value'")
            if key not in types:
                raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, types[key], value)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "noise_clip":
                value = f"{value[0]!r},{value[1]!r}"
            lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _parse_value(key, type_name, value):
    try:
        if type_name == "int":
            return int(float(value)) if float(value).is_integer() else int(value)
        if type_name == "float":
            return float(value)
        if type_name == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if type_name == "str":
            return value
        if type_name == "tuple":
            return tuple(float(x) for x in value.strip("()[] ").split(","))
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from None
    raise ConfigurationError(f"unsupported config type for {key}")


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("metric iterations must be strictly increasing")
        self.records.append(record)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def final_score(self, last: int = LAST_EVALS) -> float:
        """Mean normalized score over the last ``last`` evaluations."""
        scores = self.column("normalized_score")
        return float(np.mean(scores[-last:])) if len(scores) else float("nan")

    def __len__(self):
        return len(self.records)


class DIVOTrainer:
    """Holds every network, optimizer and random stream of one training run."""

    def __init__(self, config: TrainConfig, dataset: OfflineDataset, env: Env | str):
        self.config = config
        self.env = make_env(env) if isinstance(env, str) else env
        if (dataset.state_dim, dataset.action_dim) != (self.env.spec.state_dim, self.env.spec.action_dim):
            raise ConfigurationError(
                f"dataset dims ({dataset.state_dim}, {dataset.action_dim}) do not match "
                f"{self.env.spec.id} ({self.env.spec.state_dim}, {self.env.spec.action_dim})"
            )
        if config.normalize_states and not dataset.normalized:
            dataset = normalize_states(copy.deepcopy(dataset))
        self.dataset = dataset
        if config.batch_size > len(dataset):
            raise ConfigurationError("batch_size exceeds the dataset size")

        c = config
        ds, da = dataset.state_dim, dataset.action_dim
        dtype = np.dtype(c.dtype)
        self.rngs = seed_streams(c.seed, RNG_STREAMS)
        init_rngs = seed_streams(int(self.rngs["init"].integers(2**63)), ("omega", "q", "v", "theta"))
        self.diffusion = DiffusionPolicy(
            ds, da, NoiseSchedule.variance_preserving(c.K), c.hidden_dim, c.num_layers,
            rng=init_rngs["omega"], dtype=dtype,
        )
        self.critics = CriticPair(
            ds, da, c.gamma, c.hidden_dim, c.num_layers, rng=init_rngs["q"], dtype=dtype
        )
        self.value_fn = ValueFn(
            ds, c.hidden_dim, c.num_layers, c.expectile, rng=init_rngs["v"], dtype=dtype
        )
        self.actor = Actor(
            ds, da, c.alpha, c.beta_reg, c.policy_update_freq, c.hidden_dim, c.num_layers,
            rng=init_rngs["theta"], dtype=dtype,
        )
        self.optims = {
            "omega": AdamState.zeros(self.diffusion.spec.num_params, c.lr_diffusion, dtype),
            "q1": AdamState.zeros(self.critics.spec.num_params, c.lr_q, dtype),
            "q2": AdamState.zeros(self.critics.spec.num_params, c.lr_q, dtype),
            "v": AdamState.zeros(self.value_fn.spec.num_params, c.lr_value, dtype),
            "theta": AdamState.zeros(self.actor.spec.num_params, c.lr_policy, dtype),
        }
        self.iteration = 0
        self.metrics = RunMetrics()
        self._acc = _Accumulator()
        # Called as on_update(name, iteration) after each network update.
        self.on_update: Optional[Callable[[str, int], None]] = None

    # -- parameter plumbing -------------------------------------------------

    def param_arrays(self) -> dict:
        return {
            "omega": self.diffusion.params,
            "q1": self.critics.q1,
            "q2": self.critics.q2,
            "q1_target": self.critics.q1_target,
            "q2_target": self.critics.q2_target,
            "v": self.value_fn.params,
            "theta": self.actor.theta,
            "theta_target": self.actor.theta_target,
        }

    def _set_param(self, name, value):
        owner, attr = {
            "omega": (self.diffusion, "params"),
            "q1": (self.critics, "q1"),
            "q2": (self.critics, "q2"),
            "q1_target": (self.critics, "q1_target"),
            "q2_target": (self.critics, "q2_target"),
            "v": (self.value_fn, "params"),
            "theta": (self.actor, "theta"),
            "theta_target": (self.actor, "theta_target"),
        }[name]
        setattr(owner, attr, value)

    def _apply(self, name, params, grad, loss_name):
        try:
            adam_step(self.optims[name], params, grad, self.config.grad_clip_norm or None)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(
                f"{loss_name} update diverged at iteration {self.iteration}: {exc}"
            ) from exc

    def _check_loss(self, name, value):
        if not np.isfinite(value):
            raise TrainingDivergenceError(f"{name} is non-finite at iteration {self.iteration}")

    def _notify(self, name):
        if self.on_update is not None:
            self.on_update(name, self.iteration)

    # -- one iteration of the algorithm ------------------------------------

    def step(self) -> None:
        """One iteration: diffusion, critics, value, then (delayed) actor and targets."""
        self.iteration += 1
        try:
            self._step()
        except TrainingDivergenceError:
            raise
        except NumericError as exc:
            raise TrainingDivergenceError(f"iteration {self.iteration}: {exc}") from exc

    def _step(self) -> None:
        c = self.config
        batch = sample_batch(self.dataset, c.batch_size, self.rngs["batch"])

        # (1) positive-advantage diffusion update. Q and V are untouched until
        # steps (2) and (3), so their forward passes are shared with them.
        online = online_forward(self.critics, batch.states, batch.actions)
        v_cached = forward_cached(self.value_fn.spec, self.value_fn.params, batch.states)
        adv = np.minimum(online[0][0], online[1][0])[:, 0] - v_cached[0][:, 0]
        weights = pad_weights(adv, c.eta)
        loss, grad = weighted_denoising_loss(
            self.diffusion, batch.states, batch.actions, weights, self.rngs["diffusion"]
        )
        self._check_loss("pad_loss", loss)
        self._apply("omega", self.diffusion.params, grad, "pad_loss")
        self._acc.add("pad_loss", loss)
        self._notify("diffusion")

        # (2) twin critics
        loss, g1, g2 = td_loss(
            self.critics, self.actor, batch, c.policy_noise, c.noise_clip, self.rngs["td"], online
        )
        self._check_loss("td_loss", loss)
        self._apply("q1", self.critics.q1, g1, "td_loss")
        self._apply("q2", self.critics.q2, g2, "td_loss")
        self._acc.add("td_loss", loss)
        self._notify("critics")

        # (3) value function
        loss, grad = value_loss(self.value_fn, self.critics, batch.states, batch.actions, v_cached)
        self._check_loss("value_loss", loss)
        self._apply("v", self.value_fn.params, grad, "value_loss")
        self._acc.add("value_loss", loss)
        self._notify("value")

        # (4) delayed actor and target updates
        if self.iteration % c.policy_update_freq == 0:
            pi_cached = forward_cached(self.actor.spec, self.actor.theta, batch.states)
            targets, took = select_target_action(
                self.diffusion, self.critics, self.value_fn, self.actor, batch.states,
                self.rngs["gate"], actor_actions=pi_cached[0],
            )
            loss, grad, lam = policy_loss(
                self.actor, self.critics, targets, batch.states, cached=pi_cached
            )
            self._check_loss("policy_loss", loss)
            self._apply("theta", self.actor.theta, grad, "policy_loss")
            self._acc.add("policy_loss", loss)
            self._acc.add("gate_diffusion_fraction", float(np.mean(took)))
            self._acc.add("lambda", lam)
            self._notify("actor")

            self.critics.q1_target = polyak_update(self.critics.q1_target, self.critics.q1, c.tau)
            self.critics.q2_target = polyak_update(self.critics.q2_target, self.critics.q2, c.tau)
            self.actor.theta_target = polyak_update(self.actor.theta_target, self.actor.theta, c.tau)
            self._notify("targets")

        if self.iteration % c.eval_interval == 0:
            self._record()

    def _record(self):
        mean_return, _ = self.evaluate(self.config.eval_episodes, self.rngs["eval"])
        record = {
            "iteration": self.iteration,
            "eval_return": mean_return,
            "normalized_score": float(normalized_score(self.env.spec.id, mean_return)),
        }
        for name in METRICS_FIELDS[3:]:
            record[name] = self._acc.mean(name)
        self._acc = _Accumulator()
        self.metrics.append(record)
        logger.info(
            "iter %d return %.3f score %.1f gate %.3f",
            record["iteration"], mean_return, record["normalized_score"], record["gate_diffusion_fraction"],
        )

    def run(self, iterations: Optional[int] = None) -> RunMetrics:
        """Run until ``total_iterations`` (or for ``iterations`` more steps)."""
        stop = self.config.total_iterations if iterations is None else self.iteration + iterations
        while self.iteration < stop:
            self.step()
        return self.metrics

    def policy(self, states) -> np.ndarray:
        """Deployed deterministic policy on already-normalized states."""
        return self.actor.act(states)

    def evaluate(self, episodes: int, rng: np.random.Generator):
        return evaluate_policy(
            self.env, self.actor.act, episodes, rng,
            self.dataset.state_mean, self.dataset.state_std, self.dataset.normalized,
        )

    # -- checkpoints --------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        arrays = dict(self.param_arrays())
        for name, opt in self.optims.items():
            arrays[f"adam.{name}.m"] = opt.first_moment
            arrays[f"adam.{name}.v"] = opt.second_moment
        arrays["state_mean"] = np.asarray(self.dataset.state_mean, dtype=np.float64)
        arrays["state_std"] = np.asarray(self.dataset.state_std, dtype=np.float64)
        meta = {
            "config": self.config.to_text(),
            "env_id": self.env.spec.id,
            "state_dim": self.dataset.state_dim,
            "action_dim": self.dataset.action_dim,
            "normalized": self.dataset.normalized,
            "iteration": self.iteration,
            "adam_steps": {name: opt.step_count for name, opt in self.optims.items()},
            "rng_states": {name: rng.bit_generator.state for name, rng in self.rngs.items()},
            "metrics": self.metrics.records,
            "accumulator": self._acc.sums,
            "arrays": [[name, int(a.size)] for name, a in arrays.items()],
        }
        blob = json.dumps(meta, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
            f.write(blob)
            for a in arrays.values():
                f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    @classmethod
    def load_checkpoint(cls, path, dataset: OfflineDataset, env: Env | str | None = None) -> "DIVOTrainer":
        """Restore a run. ``dataset`` must be the (raw or normalized) training data."""
        meta, arrays = read_checkpoint(path)
        env = env if env is not None else meta["env_id"]
        env = make_env(env) if isinstance(env, str) else env
        if (env.spec.state_dim, env.spec.action_dim) != (meta["state_dim"], meta["action_dim"]):
            raise ConfigurationError(
                f"checkpoint dims ({meta['state_dim']}, {meta['action_dim']}) do not match "
                f"{env.spec.id} ({env.spec.state_dim}, {env.spec.action_dim})"
            )
        config = TrainConfig.from_text(meta["config"])
        if meta["normalized"] and not dataset.normalized:
            dataset = copy.deepcopy(dataset)
            dataset.states = (dataset.states - arrays["state_mean"]) / arrays["state_std"]
            dataset.next_states = (dataset.next_states - arrays["state_mean"]) / arrays["state_std"]
            dataset.state_mean, dataset.state_std = arrays["state_mean"], arrays["state_std"]
            dataset.normalized = True
        trainer = cls(config, dataset, env)
        dtype = np.dtype(config.dtype)
        for name in trainer.param_arrays():
            trainer._set_param(name, arrays[name].astype(dtype))
        for name, opt in trainer.optims.items():
            opt.first_moment = arrays[f"adam.{name}.m"].astype(dtype)
            opt.second_moment = arrays[f"adam.{name}.v"].astype(dtype)
            opt.step_count = meta["adam_steps"][name]
        for name, state in meta["rng_states"].items():
            trainer.rngs[name].bit_generator.state = state
        trainer.iteration = meta["iteration"]
        trainer.metrics = RunMetrics(meta["metrics"])
        trainer._acc = _Accumulator(meta["accumulator"])
        return trainer


def read_checkpoint(path):
    """Decode a checkpoint into ``(metadata, {name: array})``."""
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError("checkpoint shorter than its header", offset=len(blob))
    magic, version, meta_len = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = _CKPT_HEADER.size
    try:
        meta = json.loads(blob[pos:pos + meta_len])
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}", offset=pos) from None
    pos += meta_len
    arrays = {}
    for name, size in meta["arrays"]:
        end = pos + 8 * size
        if end > len(blob):
            raise FormatError(f"checkpoint truncated inside array {name!r}", offset=len(blob))
        arrays[name] = np.frombuffer(blob, "<f8", size, pos).astype(np.float64)
        pos = end
    if pos != len(blob):
        raise FormatError("trailing bytes after the last array", offset=pos)
    return meta, arrays


class _Accumulator:
    def __init__(self, sums=None):
        self.sums = sums if sums is not None else {}

    def add(self, name, value):
        total, count = self.sums.get(name, (0.0, 0))
        self.sums[name] = (total + float(value), count + 1)

    def mean(self, name):
        total, count = self.sums.get(name, (0.0, 0))
        return total / count if count else float("nan")


def train(config: TrainConfig, dataset: OfflineDataset, env: Env | str):
    """Run one full training job. Returns ``(trainer, metrics)``."""
    trainer = DIVOTrainer(config, dataset, env)
    trainer.run()
    return trainer, trainer.metrics


def train_behavior_cloning(config: TrainConfig, dataset: OfflineDataset, env: Env | str):
    """Baseline: the same actor network regressed onto dataset actions by MSE.

    Uses ``total_iterations`` Adam steps at ``lr_policy`` and the same
    evaluation schedule as :func:`train`. Returns ``(actor, metrics)``.
    """
    from .approximator import backward_cached

    env = make_env(env) if isinstance(env, str) else env
    if config.normalize_states and not dataset.normalized:
        dataset = normalize_states(copy.deepcopy(dataset))
    rngs = seed_streams(config.seed, RNG_STREAMS)
    actor = Actor(
        dataset.state_dim, dataset.action_dim, config.alpha, config.beta_reg, 1,
        config.hidden_dim, config.num_layers, rng=rngs["init"], dtype=np.dtype(config.dtype),
    )
    opt = AdamState.zeros(actor.spec.num_params, config.lr_policy, np.dtype(config.dtype))
    metrics = RunMetrics()
    losses = _Accumulator()
    for t in range(1, config.total_iterations + 1):
        batch = sample_batch(dataset, config.batch_size, rngs["batch"])
        pred, acts = forward_cached(actor.spec, actor.theta, batch.states)
        diff = pred - batch.actions
        losses.add("policy_loss", float(np.mean(np.sum(diff * diff, axis=1))))
        grad, _ = backward_cached(actor.spec, actor.theta, acts, (2.0 / len(diff)) * diff)
        adam_step(opt, actor.theta, grad)
        if t % config.eval_interval == 0:
            mean_return, _ = evaluate_policy(
                env, actor.act, config.eval_episodes, rngs["eval"],
                dataset.state_mean, dataset.state_std, dataset.normalized,
            )
            record = dict.fromkeys(METRICS_FIELDS, float("nan"))
            record.update(
                iteration=t, eval_return=mean_return,
                normalized_score=float(normalized_score(env.spec.id, mean_return)),
                policy_loss=losses.mean("policy_loss"),
            )
            losses = _Accumulator()
            metrics.append(record)
    return actor, metrics


def interquartile_mean(scores) -> float:
    """Mean of the middle 50% (25% trimmed from each side)."""
    return float(stats.trim_mean(np.asarray(scores, dtype=float), 0.25))


def metrics_csv(metrics: RunMetrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_FIELDS)
    for record in metrics.records:
        writer.writerow([
            record[name] if name == "iteration" else repr(float(record[name]))
            for name in METRICS_FIELDS
        ])
    return buf.getvalue()


def aggregate_scores(final_scores) -> dict:
    scores = np.asarray(final_scores, dtype=float)
    return {
        "runs": int(len(scores)),
        "mean": float(np.mean(scores)),
        "median": float(np.median(scores)),
        "iqm": interquartile_mean(scores),
    }


def emit_metrics(metrics, path, summary_path=None) -> None:
    """Write one run's metrics CSV, or several runs plus a summary.

    ``metrics`` is a :class:`RunMetrics` or a list of them. With several runs,
    ``path`` is a directory receiving ``run_<i>.csv`` files and
    ``summary.csv`` (mean, median and IQM of final normalized scores).
    """
    if isinstance(metrics, RunMetrics):
        Path(path).write_text(metrics_csv(metrics))
        return
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(metrics):
        (out / f"run_{i}.csv").write_text(metrics_csv(m))
    summary = aggregate_scores([m.final_score() for m in metrics])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(summary))
    writer.writerow([summary["runs"]] + [repr(summary[k]) for k in ("mean", "median", "iqm")])
    Path(summary_path or out / "summary.csv").write_text(buf.getvalue())


__all__ = [
    "DIVOTrainer", "METRICS_FIELDS", "RunMetrics", "TrainConfig", "aggregate_scores",
    "emit_metrics", "interquartile_mean", "metrics_csv", "read_checkpoint",
    "train", "train_behavior_cloning",
]
