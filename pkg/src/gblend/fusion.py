"""Late-fusion network with one classifier per modality plus a fused classifier.

Head indices run ``0..k-1`` for the modality heads and ``k`` for the fused
head, so a weight vector ``[w_rgb, w_audio, w_join]`` lines up with
``MultiHeadNet.heads + [fusion]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .nn import (CHECKPOINT_VERSION, Mlp, MlpCache, mlp_from_dict, mlp_to_dict, softmax,
                 softmax_cross_entropy)

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class BlendWeights:
    weights: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if not w:
            raise ValueError("blend weights cannot be empty")
        if any(v < 0 or not np.isfinite(v) for v in w):
            raise ValueError(f"blend weights must be finite and nonnegative: {w}")
        if abs(sum(w) - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"blend weights must sum to 1, got {sum(w)!r}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def one_hot(cls, n_heads: int, index: int) -> "BlendWeights":
        w = [0.0] * n_heads
        w[index] = 1.0
        return cls(tuple(w))

    @classmethod
    def uniform(cls, n_heads: int) -> "BlendWeights":
        w = np.full(n_heads, 1.0 / n_heads)
        w[-1] = 1.0 - w[:-1].sum()
        return cls(tuple(w))

    def __len__(self):
        return len(self.weights)

    def __getitem__(self, i):
        return self.weights[i]

    def as_array(self) -> np.ndarray:
        return np.array(self.weights)


@dataclass
class Batch:
    inputs: list
    labels: np.ndarray

    def __post_init__(self):
        rows = {x.shape[0] for x in self.inputs}
        if len(rows) > 1 or (rows and next(iter(rows)) != len(self.labels)):
            raise DimensionError("modalities and labels must have equal row counts")

    def __len__(self):
        return len(self.labels)


@dataclass
class NetCache:
    net: "MultiHeadNet"
    encoder_caches: list
    head_caches: list
    fusion_cache: MlpCache


class MultiHeadNet:
    def __init__(self, encoders: Sequence[Mlp], heads: Sequence[Mlp], fusion: Mlp, class_count: int):
        if len(encoders) != len(heads) or not encoders:
            raise DimensionError("need one head per encoder and at least one encoder")
        for i, (enc, head) in enumerate(zip(encoders, heads)):
            if head.in_dim != enc.out_dim:
                raise DimensionError(f"head {i} expects {head.in_dim} features, encoder gives {enc.out_dim}")
        if fusion.in_dim != sum(e.out_dim for e in encoders):
            raise DimensionError("fusion head input must equal the summed feature dims")
        if any(h.out_dim != class_count for h in [*heads, fusion]):
            raise DimensionError("every head must emit class_count logits")
        self.encoders = list(encoders)
        self.heads = list(heads)
        self.fusion = fusion
        self.class_count = class_count

    @classmethod
    def build(cls, input_dims: Sequence[int], class_count: int, rng: np.random.Generator,
              encoder_hidden: Sequence[int] = (32,), feature_dim: int = 16, fusion_hidden: int = 16,
              dropout_rate: float = 0.0) -> "MultiHeadNet":
        """Encoders ``d_i -> hidden... -> feature_dim`` (relu), classifiers
        ``features -> fusion_hidden -> fusion_hidden -> C``."""
        k = len(input_dims)
        encoders = [Mlp.init([d, *encoder_hidden, feature_dim], rng, output_activation="relu")
                    for d in input_dims]
        heads = [Mlp.init([feature_dim, fusion_hidden, fusion_hidden, class_count], rng)
                 for _ in range(k)]
        fusion = Mlp.init([k * feature_dim, fusion_hidden, fusion_hidden, class_count], rng,
                          dropout_rate=dropout_rate, dropout_at=0)
        return cls(encoders, heads, fusion, class_count)

    @property
    def k(self) -> int:
        return len(self.encoders)

    @property
    def n_heads(self) -> int:
        return self.k + 1

    def feature_slices(self) -> list[slice]:
        out, start = [], 0
        for enc in self.encoders:
            out.append(slice(start, start + enc.out_dim))
            start += enc.out_dim
        return out

    def modules(self) -> list[Mlp]:
        return [*self.encoders, *self.heads, self.fusion]

    def params(self) -> list[np.ndarray]:
        return [p for m in self.modules() for p in m.params()]

    def param_owner(self) -> list[str]:
        """A label for every entry of ``params()``."""
        labels = []
        for i, m in enumerate(self.encoders):
            labels += [f"encoder{i}"] * len(m.params())
        for i, m in enumerate(self.heads):
            labels += [f"head{i}"] * len(m.params())
        labels += ["fusion"] * len(self.fusion.params())
        return labels

    def copy(self) -> "MultiHeadNet":
        return MultiHeadNet([e.copy() for e in self.encoders], [h.copy() for h in self.heads],
                            self.fusion.copy(), self.class_count)

    def with_dropout(self, rate: float) -> "MultiHeadNet":
        net = self.copy()
        net.fusion = Mlp(net.fusion.layers, rate, 0)
        return net

    def forward_all_heads(self, inputs: Sequence[np.ndarray], train_mode: bool = False,
                          rng: np.random.Generator | None = None) -> tuple[list[np.ndarray], NetCache]:
        if len(inputs) != self.k:
            raise DimensionError(f"net has {self.k} modalities, batch has {len(inputs)}")
        feats, enc_caches = [], []
        for enc, x in zip(self.encoders, inputs):
            f, c = enc.forward(x, train_mode)
            feats.append(f)
            enc_caches.append(c)
        logits, head_caches = [], []
        for head, f in zip(self.heads, feats):
            out, c = head.forward(f, train_mode)
            logits.append(out)
            head_caches.append(c)
        fused, fusion_cache = self.fusion.forward(np.concatenate(feats, axis=1), train_mode, rng)
        logits.append(fused)
        return logits, NetCache(self, enc_caches, head_caches, fusion_cache)

    def backward_blended(self, cache: NetCache, grad_logits: Sequence[np.ndarray],
                         weights: BlendWeights | Sequence[float]) -> list[np.ndarray]:
        """Gradient of ``sum_i w_i L_i`` given each head's unweighted dL_i/dlogits.

        Heads with zero weight are skipped and contribute exact zeros.
        """
        if cache.net is not self:
            raise ContractError("cache does not come from this network")
        w = tuple(weights.weights if isinstance(weights, BlendWeights) else weights)
        if len(w) != self.n_heads or len(grad_logits) != self.n_heads:
            raise DimensionError(f"expected {self.n_heads} weights and logit grads")
        enc_grad_in = [None] * self.k
        head_grads = []
        for i, head in enumerate(self.heads):
            if w[i] == 0.0:
                head_grads.append([np.zeros_like(p) for p in head.params()])
                continue
            g, g_in = head.backward(cache.head_caches[i], w[i] * grad_logits[i])
            head_grads.append(g)
            enc_grad_in[i] = g_in
        if w[-1] == 0.0:
            fusion_grads = [np.zeros_like(p) for p in self.fusion.params()]
        else:
            fusion_grads, g_cat = self.fusion.backward(cache.fusion_cache, w[-1] * grad_logits[-1])
            for i, sl in enumerate(self.feature_slices()):
                part = g_cat[:, sl]
                enc_grad_in[i] = part if enc_grad_in[i] is None else enc_grad_in[i] + part
        out = []
        for i, enc in enumerate(self.encoders):
            if enc_grad_in[i] is None:
                out.extend(np.zeros_like(p) for p in enc.params())
            else:
                out.extend(enc.backward(cache.encoder_caches[i], enc_grad_in[i])[0])
        for g in head_grads:
            out.extend(g)
        out.extend(fusion_grads)
        return out

    def predict(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        """Fused-head class probabilities."""
        logits, _ = self.forward_all_heads(inputs)
        return softmax(logits[-1])

    def mute_except(self, modality: int) -> "MultiHeadNet":
        """Copy whose fused head ignores every modality but ``modality``."""
        if not 0 <= modality < self.k:
            raise IndexError(f"modality {modality} out of range for k={self.k}")
        net = self.copy()
        w = net.fusion.layers[0].weights
        for i, sl in enumerate(self.feature_slices()):
            if i != modality:
                w[:, sl] = 0.0
        return net

    def to_dict(self) -> dict:
        return {
            "format": "gblend.multihead",
            "version": CHECKPOINT_VERSION,
            "class_count": self.class_count,
            "encoders": [mlp_to_dict(m) for m in self.encoders],
            "heads": [mlp_to_dict(m) for m in self.heads],
            "fusion": mlp_to_dict(self.fusion),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MultiHeadNet":
        if doc.get("format") != "gblend.multihead" or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 gblend multihead checkpoint")
        return cls([mlp_from_dict(d) for d in doc["encoders"]],
                   [mlp_from_dict(d) for d in doc["heads"]],
                   mlp_from_dict(doc["fusion"]), doc["class_count"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MultiHeadNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def blended_loss(logits: Sequence[np.ndarray], labels: np.ndarray,
                 weights: BlendWeights | Sequence[float]) -> tuple[float, list[float], list[np.ndarray]]:
    """Return ``(sum_i w_i L_i, [L_i], [dL_i/dlogits_i])``."""
    w = tuple(weights.weights if isinstance(weights, BlendWeights) else weights)
    if len(w) != len(logits):
        raise DimensionError(f"{len(w)} weights for {len(logits)} heads")
    losses, grads = [], []
    for z in logits:
        loss, g = softmax_cross_entropy(z, labels)
        losses.append(loss)
        grads.append(g)
    total = 0.0
    for wi, li in zip(w, losses):
        total += wi * li
    return total, losses, grads
