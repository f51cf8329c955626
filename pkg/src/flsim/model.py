"""Fully-connected softmax classifiers with hand-written backprop.

Parameters live in one flat float64 vector. Layer ``i`` occupies a weight
block of shape ``(out_i, in_i)`` stored row-major, followed by its bias.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from flsim.data.dataset import Dataset
from flsim.errors import ConfigError, InputError, NumericError


class Activation(str, enum.Enum):
    relu = "relu"
    tanh = "tanh"


class Direction(str, enum.Enum):
    descent = "descent"
    ascent = "ascent"


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.relu

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError("layer_sizes needs an input and an output size, all positive")
        if sizes[-1] < 2:
            raise ConfigError("need at least 2 output classes")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation.value}


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 1
    batch_size: int = 10
    learning_rate: float = 0.05
    direction: Direction = Direction.descent

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        object.__setattr__(self, "direction", Direction(self.direction))

    def with_direction(self, direction) -> "TrainConfig":
        return TrainConfig(self.local_epochs, self.batch_size, self.learning_rate, Direction(direction))


def _unpack(spec: ModelSpec, params: np.ndarray):
    layers = []
    offset = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = params[offset:offset + fan_out * fan_in].reshape(fan_out, fan_in)
        offset += fan_out * fan_in
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _check_params(spec: ModelSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.num_params:
        raise ConfigError(f"expected {spec.num_params} parameters, got shape {params.shape}")
    return params


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases."""
    chunks = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_out * fan_in))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def _act(kind: Activation, z):
    if kind is Activation.relu:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(kind: Activation, z, a):
    if kind is Activation.relu:
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def logits(spec: ModelSpec, params, X) -> np.ndarray:
    params = _check_params(spec, params)
    a = np.asarray(X, dtype=np.float64)
    layers = _unpack(spec, params)
    for i, (W, b) in enumerate(layers):
        z = a @ W.T + b
        a = z if i == len(layers) - 1 else _act(spec.activation, z)
    return a


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(spec: ModelSpec, params, X) -> np.ndarray:
    return softmax(logits(spec, params, X))


def _check_batch(spec: ModelSpec, X, y):
    if len(y) == 0:
        raise InputError("batch is empty")
    if X.shape[1] != spec.input_dim:
        raise ConfigError(f"feature dim {X.shape[1]} != model input size {spec.input_dim}")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ConfigError(f"labels outside [0, {spec.num_classes})")


def _loss_and_grad_arrays(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray):
    layers = _unpack(spec, params)
    n = X.shape[0]
    acts = [X]
    pre = []
    a = X
    for i, (W, b) in enumerate(layers):
        with np.errstate(over="ignore", invalid="ignore"):
            z = a @ W.T + b
        if not np.all(np.isfinite(z)):
            raise NumericError("non-finite pre-activation", layer=i)
        pre.append(z)
        if i < len(layers) - 1:
            a = _act(spec.activation, z)
            acts.append(a)
    z = pre[-1]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]
    loss = -log_p[np.arange(n), y].mean()
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", layer=len(layers) - 1)

    delta = np.exp(log_p)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ acts[i]).ravel())
        if i > 0:
            back = delta @ W
            delta = back * _act_grad(spec.activation, pre[i - 1], acts[i])
            if not np.all(np.isfinite(delta)):
                raise NumericError("non-finite gradient", layer=i - 1)
    grad = np.concatenate(grads[::-1])
    return float(loss), grad


def loss_and_grad(spec: ModelSpec, params, batch: Dataset) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over ``batch`` and its exact gradient w.r.t. ``params``."""
    params = _check_params(spec, params)
    _check_batch(spec, batch.X, batch.y)
    return _loss_and_grad_arrays(spec, params, batch.X, batch.y)


def loss(spec: ModelSpec, params, data: Dataset) -> float:
    return loss_and_grad(spec, params, data)[0]


def local_train(spec: ModelSpec, params, data: Dataset, cfg: TrainConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Minibatch SGD (or ascent) for ``cfg.local_epochs`` epochs; returns new params.

    The shuffle order is drawn from ``rng`` and nothing else.
    """
    params = _check_params(spec, params)
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    _check_batch(spec, data.X, data.y)
    sign = -1.0 if cfg.direction is Direction.descent else 1.0
    step = sign * cfg.learning_rate
    theta = params.copy()
    n = len(data)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if cfg.batch_size >= n:
                # full batch: keep the data order so the result is order-independent up to fp summation
                idx = np.arange(n)
            _, g = _loss_and_grad_arrays(spec, theta, data.X[idx], data.y[idx])
            theta = theta + step * g
    return theta


def client_update(spec: ModelSpec, global_params, data: Dataset, cfg: TrainConfig,
                  rng: np.random.Generator) -> np.ndarray:
    global_params = _check_params(spec, global_params)
    return local_train(spec, global_params, data, cfg, rng) - global_params


def predict(spec: ModelSpec, params, X) -> np.ndarray:
    """Argmax class, lowest index on ties; rows with non-finite logits predict class 0."""
    with np.errstate(all="ignore"):
        z = logits(spec, params, X)
    bad = ~np.all(np.isfinite(z), axis=1)
    z = np.where(bad[:, None], 0.0, z)
    return np.argmax(z, axis=1)


def evaluate(spec: ModelSpec, params, test: Dataset) -> float:
    if len(test) == 0:
        raise InputError("test set is empty")
    if test.dim != spec.input_dim:
        raise ConfigError(f"feature dim {test.dim} != model input size {spec.input_dim}")
    return float(np.mean(predict(spec, params, test.X) == test.y))
