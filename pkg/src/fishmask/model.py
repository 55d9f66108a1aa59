"""Small differentiable classifiers over a flat float64 parameter vector.

A model is a stack of dense layers (logistic regression when there is no
hidden layer) ending in a log-softmax. Parameters live in one flat vector,
ordered layer by layer with each layer's weight matrix (fan_in x fan_out,
row-major) followed by its bias. Masks, Fisher scores and deltas all index
this shared address space.

Gradients are computed by hand-written reverse-mode passes; the backward
helpers also expose per-example quantities so the Fisher estimators can
accumulate squared per-example gradients without a Python loop.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._io import atomic_write

ACTIVATIONS = ("relu", "tanh")

PARAMS_MAGIC = b"FSHP"
_PARAMS_HEADER = struct.Struct("<4sHxxQ")
PARAMS_VERSION = 1


class LayerSlices(NamedTuple):
    weight: slice
    bias: slice
    fan_in: int
    fan_out: int


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input dim and class count")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ValueError("a classifier needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @cached_property
    def layers(self) -> tuple[LayerSlices, ...]:
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset = w.stop
            b = slice(offset, offset + fan_out)
            offset = b.stop
            out.append(LayerSlices(w, b, fan_in, fan_out))
        return tuple(out)

    @property
    def n_params(self) -> int:
        return self.layers[-1].bias.stop

    @property
    def classifier_slice(self) -> range:
        """Indices of the final linear layer (weights and bias)."""
        last = self.layers[-1]
        return range(last.weight.start, last.bias.stop)

    def layout(self) -> list[dict]:
        """Named slices of the flat vector, e.g. for reports."""
        rows = []
        for i, layer in enumerate(self.layers):
            rows.append({"name": f"layer{i}.weight", "start": layer.weight.start,
                         "stop": layer.weight.stop, "shape": [layer.fan_in, layer.fan_out]})
            rows.append({"name": f"layer{i}.bias", "start": layer.bias.start,
                         "stop": layer.bias.stop, "shape": [layer.fan_out]})
        return rows

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of (W, b) per layer. No copies are made."""
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        return [(params[l.weight].reshape(l.fan_in, l.fan_out), params[l.bias])
                for l in self.layers]

    def to_dict(self, seed: int | None = None) -> dict:
        d = {"layer_sizes": list(self.layer_sizes), "activation": self.activation}
        if seed is not None:
            d["seed"] = seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(tuple(d["layer_sizes"]), d.get("activation", "relu"))

    def to_json(self, seed: int | None = None) -> str:
        return json.dumps(self.to_dict(seed))

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        return cls.from_dict(json.loads(text))


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Fan-in scaled Gaussian weights (He for relu, LeCun for tanh), zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params, dtype=np.float64)
    gain = 2.0 if spec.activation == "relu" else 1.0
    for layer in spec.layers:
        std = np.sqrt(gain / layer.fan_in)
        params[layer.weight] = rng.normal(0.0, std, size=layer.fan_in * layer.fan_out)
    return params


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class ForwardCache(NamedTuple):
    inputs: list[np.ndarray]   # input to each layer, (n, fan_in)
    preacts: list[np.ndarray]  # pre-activation of each hidden layer
    log_probs: np.ndarray      # (n, classes)


def _as_batch(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"features must have dim {spec.input_dim}, got shape {X.shape}")
    return X


def forward_cache(spec: ModelSpec, params: np.ndarray, X) -> ForwardCache:
    X = _as_batch(spec, X)
    layers = spec.unpack(params)
    inputs, preacts = [], []
    h = X
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if i < len(layers) - 1:
            preacts.append(z)
            h = _act(spec.activation, z)
        else:
            h = z
    return ForwardCache(inputs, preacts, log_softmax(h))


def forward(spec: ModelSpec, params: np.ndarray, features) -> np.ndarray:
    """Log-probabilities; shape (classes,) for one example or (n, classes) for a batch."""
    single = np.ndim(features) == 1
    lp = forward_cache(spec, params, features).log_probs
    return lp[0] if single else lp


def _backward_signals(spec: ModelSpec, params: np.ndarray, cache: ForwardCache,
                      dlogits: np.ndarray) -> list[np.ndarray]:
    """Per-example gradients w.r.t. each layer's pre-activation output, (n, fan_out)."""
    layers = spec.unpack(params)
    signals = [None] * len(layers)
    g = dlogits
    for i in range(len(layers) - 1, -1, -1):
        signals[i] = g
        if i > 0:
            W = layers[i][0]
            z = cache.preacts[i - 1]
            g = (g @ W.T) * _act_grad(spec.activation, z, cache.inputs[i])
    return signals


def backward(spec: ModelSpec, params: np.ndarray, cache: ForwardCache,
             dlogits: np.ndarray) -> np.ndarray:
    """Gradient summed over the batch given d(objective)/d(logits) per example."""
    grad = np.empty(spec.n_params, dtype=np.float64)
    signals = _backward_signals(spec, params, cache, dlogits)
    for layer, a, g in zip(spec.layers, cache.inputs, signals):
        grad[layer.weight] = (a.T @ g).ravel()
        grad[layer.bias] = g.sum(axis=0)
    return grad


def squared_grad_sum(spec: ModelSpec, params: np.ndarray, cache: ForwardCache,
                     dlogits: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """sum_i w_i * (per-example gradient_i)**2, elementwise.

    Row i of ``dlogits`` is the logit-space gradient of example i. A dense
    layer's per-example weight gradient is outer(a_i, g_i), whose elementwise
    square is outer(a_i**2, g_i**2), so the sum over examples is a matmul.
    """
    out = np.empty(spec.n_params, dtype=np.float64)
    signals = _backward_signals(spec, params, cache, dlogits)
    for layer, a, g in zip(spec.layers, cache.inputs, signals):
        g2 = g * g
        if weights is not None:
            g2 = g2 * weights[:, None]
        out[layer.weight] = ((a * a).T @ g2).ravel()
        out[layer.bias] = g2.sum(axis=0)
    return out


def _labels(spec: ModelSpec, y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{n} feature rows but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= spec.n_classes):
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    return y


def loss_and_grad(spec: ModelSpec, params: np.ndarray, X, y) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over the batch and its gradient."""
    X = _as_batch(spec, X)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    y = _labels(spec, y, n)
    cache = forward_cache(spec, params, X)
    rows = np.arange(n)
    loss = -cache.log_probs[rows, y].mean()
    dlogits = np.exp(cache.log_probs)
    dlogits[rows, y] -= 1.0
    dlogits /= n
    return float(loss), backward(spec, params, cache, dlogits)


def logprob_grad(spec: ModelSpec, params: np.ndarray, features, class_index: int) -> np.ndarray:
    """Gradient of log p(class_index | features) w.r.t. every parameter."""
    if not 0 <= class_index < spec.n_classes:
        raise ValueError(f"class index {class_index} out of range [0, {spec.n_classes})")
    cache = forward_cache(spec, params, np.asarray(features, dtype=np.float64).reshape(1, -1))
    dlogits = -np.exp(cache.log_probs)
    dlogits[0, class_index] += 1.0
    return backward(spec, params, cache, dlogits)


def predict(spec: ModelSpec, params: np.ndarray, X) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(forward_cache(spec, params, X).log_probs, axis=1)


def params_digest_bytes(params: np.ndarray) -> bytes:
    return np.ascontiguousarray(params, dtype="<f8").tobytes()


def save_params(path: str | os.PathLike, params: np.ndarray) -> None:
    params = np.asarray(params, dtype=np.float64)
    payload = _PARAMS_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, params.size) + params_digest_bytes(params)
    atomic_write(path, payload)


def load_params(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _PARAMS_HEADER.size:
        raise ValueError(f"{path}: truncated parameter file")
    magic, version, n = _PARAMS_HEADER.unpack_from(raw)
    if magic != PARAMS_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at offset 0")
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = raw[_PARAMS_HEADER.size:]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {n} values, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)

