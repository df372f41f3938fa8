"""Dense feed-forward networks with hand-written backprop, plus optimizers.

Tensors are plain float64 numpy arrays. Layers store weights as
``[out, in]`` so a forward pass is ``x @ W.T + b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ACTIVATIONS = ("identity", "relu")
CHECKPOINT_VERSION = 1


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not match"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class MlpCache:
    model: "Mlp"
    inputs: list
    preacts: list
    mask: np.ndarray | None


class Mlp:
    """A chain of dense layers with optional inverted dropout on one layer input."""

    def __init__(self, layers: Sequence[DenseLayer], dropout_rate: float = 0.0, dropout_at: int = 0):
        if not layers:
            raise DimensionError("an Mlp needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        if not 0 <= dropout_at < len(layers):
            raise DimensionError(f"dropout_at={dropout_at} out of range")
        self.layers = list(layers)
        self.dropout_rate = float(dropout_rate)
        self.dropout_at = dropout_at

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, hidden_activation="relu",
             output_activation="identity", dropout_rate=0.0, dropout_at=0) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(DenseLayer(w, np.zeros(fan_out), act))
        return cls(layers, dropout_rate=dropout_rate, dropout_at=dropout_at)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def copy(self) -> "Mlp":
        layers = [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return Mlp(layers, self.dropout_rate, self.dropout_at)

    def forward(self, x: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, MlpCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"expected input [batch x {self.in_dim}], got {x.shape}")
        inputs, preacts, mask = [], [], None
        h = x
        for i, layer in enumerate(self.layers):
            if i == self.dropout_at and train_mode and self.dropout_rate > 0.0:
                if rng is None:
                    raise ContractError("dropout in train mode needs an rng")
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            inputs.append(h)
            z = h @ layer.weights.T + layer.bias
            preacts.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        return h, MlpCache(self, inputs, preacts, mask)

    def backward(self, cache: MlpCache, grad_output: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return (parameter grads in ``params()`` order, grad w.r.t. the input)."""
        if cache.model is not self or len(cache.inputs) != len(self.layers):
            raise ContractError("cache does not come from this model's forward pass")
        g = np.asarray(grad_output, dtype=np.float64)
        if g.shape != cache.preacts[-1].shape:
            raise DimensionError(f"grad_output {g.shape} vs output {cache.preacts[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if cache.inputs[i].shape[1] != layer.in_dim:
                raise ContractError("cache shapes no longer match the model")
            if layer.activation == "relu":
                g = g * (cache.preacts[i] > 0.0)
            grads[2 * i] = g.T @ cache.inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ layer.weights
            if i == self.dropout_at and cache.mask is not None:
                g = g * cache.mask
        return grads, g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Integer labels of shape ``[batch]`` select softmax cross-entropy. A
    ``[batch x classes]`` multi-hot array selects per-class sigmoid
    cross-entropy averaged over classes and batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.shape[0] != n:
            raise DimensionError(f"{labels.shape[0]} labels for {n} rows")
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError("label index out of range")
        z = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(n)
        loss = float(np.mean(log_norm - z[rows, labels]))
        grad = softmax(logits)
        grad[rows, labels] -= 1.0
        return loss, grad / n
    if labels.shape != logits.shape:
        raise DimensionError(f"multi-hot labels {labels.shape} vs logits {logits.shape}")
    y = labels.astype(np.float64)
    # log(1 + exp(-|x|)) + max(x, 0) - x*y
    per = np.logaddexp(0.0, logits) - logits * y
    loss = float(per.mean())
    grad = (sigmoid(logits) - y) / (n * c)
    return loss, grad


def finite_diff_grad(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                     step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. each array in ``params``.

    The arrays are perturbed in place and restored afterwards.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_fn()
            flat[j] = orig - step
            down = loss_fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        out.append(g)
    return out


# -- optimizers ---------------------------------------------------------------

@dataclass
class OptimizerSpec:
    kind: str = "sgd_momentum"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self) -> "Optimizer":
        if self.kind == "sgd_momentum":
            return SGDMomentum(self.lr, self.momentum)
        if self.kind == "adagrad":
            return AdaGrad(self.lr, self.eps)
        if self.kind == "adam":
            return Adam(self.lr, self.beta1, self.beta2, self.eps)
        raise ValueError(f"unknown optimizer kind {self.kind!r}")


class Optimizer:
    kind = ""

    def __init__(self, lr: float):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = float(lr)
        self.state: list[dict] | None = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise DimensionError(f"{len(params)} params vs {len(grads)} grads")
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise DimensionError(f"param {i}: shape {p.shape} vs grad {g.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter tensor {i} (shape {p.shape})")
        if self.state is None:
            self.state = [self._init_state(p) for p in params]
        for p, g, s in zip(params, grads, self.state):
            self._update(p, g, s)

    def _init_state(self, p):
        raise NotImplementedError

    def _update(self, p, g, s):
        raise NotImplementedError


class SGDMomentum(Optimizer):
    """v <- mu*v + g; theta <- theta - lr*v."""

    kind = "sgd_momentum"

    def __init__(self, lr: float, momentum: float = 0.9):
        super().__init__(lr)
        self.momentum = float(momentum)

    def _init_state(self, p):
        return {"v": np.zeros_like(p)}

    def _update(self, p, g, s):
        v = s["v"]
        v *= self.momentum
        v += g
        p -= self.lr * v


class AdaGrad(Optimizer):
    kind = "adagrad"

    def __init__(self, lr: float, eps: float = 1e-10):
        super().__init__(lr)
        self.eps = float(eps)

    def _init_state(self, p):
        return {"sum_sq": np.zeros_like(p)}

    def _update(self, p, g, s):
        s["sum_sq"] += g * g
        p -= self.lr * g / (np.sqrt(s["sum_sq"]) + self.eps)


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)

    def _init_state(self, p):
        return {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}

    def _update(self, p, g, s):
        s["t"] += 1
        t = s["t"]
        s["m"] *= self.beta1
        s["m"] += (1.0 - self.beta1) * g
        s["v"] *= self.beta2
        s["v"] += (1.0 - self.beta2) * g * g
        m_hat = s["m"] / (1.0 - self.beta1 ** t)
        v_hat = s["v"] / (1.0 - self.beta2 ** t)
        p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- serialization ------------------------------------------------------------

def _hex_list(a: np.ndarray) -> list[str]:
    return [float(v).hex() for v in a.reshape(-1)]


def _from_hex(values: Sequence[str], shape) -> np.ndarray:
    return np.array([float.fromhex(v) for v in values], dtype=np.float64).reshape(shape)


def mlp_to_dict(model: Mlp) -> dict:
    return {
        "dropout_rate": model.dropout_rate,
        "dropout_at": model.dropout_at,
        "layers": [
            {
                "shape": list(layer.weights.shape),
                "activation": layer.activation,
                "weights": _hex_list(layer.weights),
                "bias": _hex_list(layer.bias),
            }
            for layer in model.layers
        ],
    }


def mlp_from_dict(doc: dict) -> Mlp:
    layers = []
    for entry in doc["layers"]:
        out_dim, in_dim = entry["shape"]
        layers.append(DenseLayer(
            _from_hex(entry["weights"], (out_dim, in_dim)),
            _from_hex(entry["bias"], (out_dim,)),
            entry["activation"],
        ))
    return Mlp(layers, doc.get("dropout_rate", 0.0), doc.get("dropout_at", 0))
