"""Dense MLP with manual backpropagation.

Weights are stored out x in, biases as out x 1 columns, so a layer computes
Z = X W^T + b^T for a batch X (rows are samples). Optional per-layer input
normalizations run before the affine map and are differentiated through.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..densela import NonFiniteError, frobenius_norm, lambda_max_power

VAR_FLOOR = 1e-8


class Activation(str, enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


class PreNorm(str, enum.Enum):
    NONE = "none"
    FROBNORM = "frobnorm"
    STANDARDIZE = "standardize"


def frobnorm(x, return_flag: bool = False):
    """X / ||X||_F. A zero input is returned unchanged (flag True)."""
    x = np.asarray(x, dtype=np.float64)
    norm = frobenius_norm(x)
    out = x / norm if norm > 0.0 else x.copy()
    return (out, norm == 0.0) if return_flag else out


def standardize(x) -> np.ndarray:
    """Per-column zero mean and unit (population) variance, variance floored."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("standardize needs a 2-D batch with at least two rows")
    centered = x - x.mean(axis=0)
    return centered / np.sqrt(np.maximum(np.mean(centered**2, axis=0), VAR_FLOOR))


def _norm_forward(x, kind: PreNorm):
    if kind is PreNorm.NONE:
        return x, None
    if kind is PreNorm.FROBNORM:
        norm = frobenius_norm(x)
        if norm == 0.0:
            return x.copy(), ("zero",)
        return x / norm, (norm,)
    centered = x - x.mean(axis=0)
    std = np.sqrt(np.maximum(np.mean(centered**2, axis=0), VAR_FLOOR))
    return centered / std, (std,)


def _norm_backward(dy, y, kind: PreNorm, cache):
    if kind is PreNorm.NONE:
        return dy
    if kind is PreNorm.FROBNORM:
        if cache[0] == "zero":
            return dy
        return (dy - y * np.sum(y * dy)) / cache[0]
    (std,) = cache
    return (dy - dy.mean(axis=0) - y * np.mean(dy * y, axis=0)) / std


@dataclass
class Layer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out x 1
    activation: Activation = Activation.RELU
    pre_norm: PreNorm = PreNorm.NONE


@dataclass
class MLP:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ValueError(f"layer {i} outputs {a.weight.shape[0]} but layer {i + 1} expects {b.weight.shape[1]}")
        for i, layer in enumerate(self.layers):
            if layer.bias.shape != (layer.weight.shape[0], 1):
                raise ValueError(f"layer {i} bias must be a {layer.weight.shape[0]}x1 column")

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            yield f"layer{i}.weight", layer.weight
            yield f"layer{i}.bias", layer.bias

    def copy(self) -> MLP:
        return MLP([Layer(l.weight.copy(), l.bias.copy(), l.activation, l.pre_norm) for l in self.layers])


def init_mlp(
    sizes=(16, 32, 32, 3),
    seed: int = 0,
    pre_norm: PreNorm | str = PreNorm.NONE,
    gain: float = 1.0,
) -> MLP:
    """He-normal weights scaled by ``gain``, zero biases, ReLU on all but the last layer."""
    rng = np.random.default_rng(seed)
    pre_norm = PreNorm(pre_norm)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        w = rng.standard_normal((fan_out, fan_in)) * gain * np.sqrt(2.0 / fan_in)
        act = Activation.IDENTITY if i == len(sizes) - 2 else Activation.RELU
        layers.append(Layer(w, np.zeros((fan_out, 1)), act, pre_norm))
    return MLP(layers)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_p = shifted - log_z
    b = logits.shape[0]
    loss = -float(np.mean(log_p[np.arange(b), labels]))
    d = np.exp(log_p)
    d[np.arange(b), labels] -= 1.0
    return loss, d / b


def forward(model: MLP, x) -> tuple[np.ndarray, list]:
    """Logits and the per-layer cache (normalized inputs first)."""
    h = np.asarray(x, dtype=np.float64)
    cache = []
    for i, layer in enumerate(model.layers):
        xn, ncache = _norm_forward(h, layer.pre_norm)
        z = xn @ layer.weight.T + layer.bias.T
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite pre-activation in layer {i}")
        h = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
        cache.append((xn, ncache, z))
    return h, cache


def predict(model: MLP, x) -> np.ndarray:
    return np.argmax(forward(model, x)[0], axis=1)


def loss_only(model: MLP, x, labels) -> float:
    logits, _ = forward(model, x)
    return softmax_xent(logits, labels)[0]


def forward_backward(model: MLP, x, labels):
    """(loss, grads, layer_inputs).

    ``grads`` maps parameter labels to arrays shaped like the parameters;
    ``layer_inputs`` holds each layer's input after its pre-normalization.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    logits, cache = forward(model, x)
    loss, dz = softmax_xent(logits, labels)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss at output layer {len(model.layers) - 1}")
    grads = {}
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        xn, ncache, z = cache[i]
        if layer.activation is Activation.RELU:
            dz = dz * (z > 0.0)
        grads[f"layer{i}.weight"] = dz.T @ xn
        grads[f"layer{i}.bias"] = dz.sum(axis=0).reshape(-1, 1)
        if i > 0:
            dz = _norm_backward(dz @ layer.weight, xn, layer.pre_norm, ncache)
    return loss, grads, [c[0] for c in cache]


def lambda_max_probe(layer_inputs_batches) -> list[float]:
    """Batch-averaged lambda_max(X^T X) per layer.

    ``layer_inputs_batches`` is a sequence over probe batches of per-layer input lists.
    """
    batches = list(layer_inputs_batches)
    if not batches:
        raise ValueError("no probe batches")
    n_layers = len(batches[0])
    out = []
    for i in range(n_layers):
        vals = [lambda_max_power(b[i].T @ b[i]) for b in batches]
        out.append(float(np.mean(vals)))
    return out


def finite_difference_grads(model: MLP, x, labels, h: float = 1e-5) -> dict:
    """Central differences of the mean loss for every parameter entry."""
    out = {}
    for label, p in model.named_parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss_only(model, x, labels)
            p[idx] = orig - h
            down = loss_only(model, x, labels)
            p[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out[label] = g
    return out
