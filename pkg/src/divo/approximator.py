"""Feed-forward networks over flat parameter vectors.

Every network in the package (noise predictor, twin critics, value function,
actor) is an :class:`MlpSpec` plus a flat array of parameters (float64 unless a
caller asks for float32). Keeping
parameters flat makes Adam, Polyak averaging, checkpointing and finite
difference checks one-liners over a single array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, TrainingDivergenceError

DTYPE = np.float64
TANH_BOUND = 1.0 - 1e-7

ParamVector = np.ndarray


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a ReLU multilayer perceptron.

    ``num_layers`` counts affine layers, so the default of 3 gives two hidden
    layers of width ``hidden_dim``.
    """

    input_dim: int
    output_dim: int
    hidden_dim: int = 256
    num_layers: int = 3
    activation: str = "relu"
    final_activation: Optional[str] = None
    _layout: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("input_dim", "output_dim", "hidden_dim", "num_layers"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if self.final_activation not in (None, "tanh"):
            raise ConfigurationError(f"unsupported final activation {self.final_activation!r}")

        dims = [self.input_dim] + [self.hidden_dim] * (self.num_layers - 1) + [self.output_dim]
        layout = []
        offset = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            layout.append((fan_in, fan_out, w, b))
        object.__setattr__(self, "_layout", tuple(layout))

    @property
    def layout(self):
        """Tuples ``(fan_in, fan_out, weight_slice, bias_slice)`` per layer."""
        return self._layout

    @property
    def num_params(self) -> int:
        return self._layout[-1][3].stop

    def unpack(self, params: ParamVector):
        """Return ``[(W, b), ...]`` as views into ``params``."""
        check_params(self, params)
        return [
            (params[w].reshape(fan_in, fan_out), params[b])
            for fan_in, fan_out, w, b in self._layout
        ]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "activation": self.activation,
            "final_activation": self.final_activation,
        }


def check_params(spec: MlpSpec, params: ParamVector) -> None:
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ConfigurationError(
            f"parameter vector has shape {params.shape}, expected ({spec.num_params},)"
        )


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype=DTYPE) -> ParamVector:
    """Uniform initialization in +-1/sqrt(fan_in), weights and biases alike.

    Values are drawn in float64 and then cast, so the float32 initialization
    is the rounded float64 one.
    """
    params = np.empty(spec.num_params, dtype=np.float64)
    for fan_in, fan_out, w, b in spec.layout:
        bound = 1.0 / np.sqrt(fan_in)
        params[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        params[b] = rng.uniform(-bound, bound, size=fan_out)
    return params.astype(dtype, copy=False)


def zero_params(spec: MlpSpec, dtype=DTYPE) -> ParamVector:
    return np.zeros(spec.num_params, dtype=dtype)


def _check_input(spec: MlpSpec, x: np.ndarray, dtype=DTYPE) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigurationError(
            f"input has shape {x.shape}, expected (batch, {spec.input_dim})"
        )
    return x


def forward_cached(spec: MlpSpec, params: ParamVector, x: np.ndarray):
    """Forward pass that also returns the activations needed by :func:`backward_cached`.

    Computation runs in the dtype of ``params``.
    """
    x = _check_input(spec, x, params.dtype)
    layers = spec.unpack(params)
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        h = h @ W
        h += b
        if i < last:
            np.maximum(h, 0.0, out=h)
        acts.append(h)
    if spec.final_activation == "tanh":
        h = np.clip(np.tanh(h), -TANH_BOUND, TANH_BOUND)
        acts[-1] = h
    return h, acts


def backward_cached(
    spec: MlpSpec,
    params: ParamVector,
    acts: list,
    output_grad: np.ndarray,
    need_params: bool = True,
    need_input: bool = False,
):
    """Reverse pass given the cache from :func:`forward_cached`.

    Returns ``(param_grad, input_grad)``; either may be ``None`` when not
    requested.
    """
    layers = spec.unpack(params)
    g = np.asarray(output_grad, dtype=params.dtype)
    if g.shape != acts[-1].shape:
        raise ConfigurationError(
            f"output gradient has shape {g.shape}, expected {acts[-1].shape}"
        )
    if spec.final_activation == "tanh":
        y = acts[-1]
        g = g * (1.0 - y * y)
    grad = np.empty(spec.num_params, dtype=params.dtype) if need_params else None
    input_grad = None
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        _, _, w_sl, b_sl = spec.layout[i]
        h_in = acts[i]
        if need_params:
            np.matmul(h_in.T, g, out=grad[w_sl].reshape(h_in.shape[1], g.shape[1]))
            np.sum(g, axis=0, out=grad[b_sl])
        if i > 0:
            g = g @ W.T
            g *= h_in > 0.0
        elif need_input:
            input_grad = g @ W.T
    return grad, input_grad


def forward(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a batch of inputs (rows)."""
    return forward_cached(spec, params, x)[0]


def backward(spec: MlpSpec, params: ParamVector, x: np.ndarray, output_grad: np.ndarray):
    """Gradients of ``sum(output_grad * forward(x))`` w.r.t. params and input."""
    _, acts = forward_cached(spec, params, x)
    return backward_cached(spec, params, acts, output_grad, need_params=True, need_input=True)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def zeros(cls, size: int, learning_rate: float = 3e-4, dtype=DTYPE, **kwargs) -> "AdamState":
        if learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        return cls(
            np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype),
            learning_rate=learning_rate, **kwargs,
        )


def adam_step(
    state: AdamState,
    params: ParamVector,
    grad: np.ndarray,
    clip_norm: Optional[float] = None,
):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if grad.shape != params.shape or state.first_moment.shape != params.shape:
        raise ConfigurationError(
            f"adam_step length mismatch: params {params.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )
    finite = np.isfinite(grad)
    if not finite.all():
        index = int(np.flatnonzero(~finite)[0])
        raise TrainingDivergenceError(
            f"non-finite gradient entry at parameter index {index}: {grad[index]!r}"
        )
    if clip_norm:
        norm = float(np.sqrt(grad @ grad))
        if norm > clip_norm:
            grad = grad * (clip_norm / norm)

    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    sq = np.multiply(grad, grad)
    sq *= 1.0 - state.beta2
    v += sq
    if m.dtype == np.float32 and t % 32 == 0:
        # Flush subnormals, as FTZ hardware would; they make float32 math crawl.
        tiny = np.finfo(np.float32).tiny
        m[np.abs(m, out=sq) < tiny] = 0.0
        v[v < tiny] = 0.0
    # m_hat / (sqrt(v_hat) + eps), evaluated with a single scratch buffer
    denom = np.sqrt(v, out=sq)
    denom *= 1.0 / np.sqrt(1.0 - state.beta2 ** t)
    denom += state.epsilon
    np.divide(m, denom, out=denom)
    denom *= state.learning_rate / (1.0 - state.beta1 ** t)
    params -= denom
    return params, state


def polyak_update(target: ParamVector, online: ParamVector, tau: float) -> ParamVector:
    """Return ``tau * online + (1 - tau) * target``."""
    if not 0.0 < tau <= 1.0:
        raise ConfigurationError(f"tau must lie in (0, 1], got {tau}")
    if target.shape != online.shape:
        raise ConfigurationError(
            f"polyak length mismatch: target {target.shape}, online {online.shape}"
        )
    return tau * online + (1.0 - tau) * target


def seed_streams(seed: int, names) -> dict:
    """Split one root seed into independent named generators.

    The mapping depends only on ``seed`` and the order of ``names``.
    """
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}
