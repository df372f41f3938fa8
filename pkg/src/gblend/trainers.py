"""Training loops: baselines, weight estimation, offline and online blending."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import TEST, TRAIN, Dataset, split
from .errors import GBlendError, NumericError
from .fusion import Batch, BlendWeights, MultiHeadNet, blended_loss
from .nn import Optimizer, OptimizerSpec
from .ogr import METRIC_KINDS, CheckpointRecord, accuracy, ogr_between
from .seeding import derive_seed, rng_for
from .nn import softmax_cross_entropy
from .weights import HeadMeasurement, estimate_weights_practical, weight_record

log = logging.getLogger(__name__)

BASELINES = ("uni_modal", "naive_joint", "equal_weights", "dropout", "pretrain_finetune")


@dataclass
class TrainConfig:
    epochs: int = 30
    super_epoch: int = 5
    warmup: int = 10
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    batch_size: int = 64
    metric_kind: str = "loss"
    holdout_fraction: float = 0.1
    tprime_fraction: float = 0.1
    estimate_fraction: float = 1.0
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerSpec(**self.optimizer)
        if self.epochs < 1 or self.super_epoch < 1 or self.warmup < 1:
            raise ValueError("epochs, super_epoch and warmup must be positive")
        if self.super_epoch > self.epochs:
            raise ValueError("super_epoch cannot exceed epochs")
        if self.metric_kind not in METRIC_KINDS:
            raise ValueError(f"metric_kind must be one of {METRIC_KINDS}")
        for name in ("holdout_fraction", "tprime_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")
        if not 0.0 < self.estimate_fraction <= 1.0:
            raise ValueError("estimate_fraction must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class TrainData:
    train: Batch
    holdout: Batch
    test: Batch | None
    tprime: np.ndarray  # row indices into train

    @classmethod
    def from_dataset(cls, ds: Dataset, tprime_fraction: float = 0.1, seed: int = 0) -> "TrainData":
        def batch(split):
            part = ds.part(split)
            return Batch(part.features, part.labels) if len(part) else None

        train = batch("train")
        if train is None:
            raise ValueError("dataset has no train rows")
        holdout = batch("holdout")
        if holdout is None:
            raise ValueError("dataset has no holdout rows")
        n = len(train)
        rng = rng_for(seed, "tprime")
        m = max(1, int(round(tprime_fraction * n)))
        tprime = np.sort(rng.choice(n, size=m, replace=False))
        return cls(train, holdout, batch("test"), tprime)

    def train_rows(self, idx) -> Batch:
        return Batch([x[idx] for x in self.train.inputs], self.train.labels[idx])

    def tprime_batch(self) -> Batch:
        return self.train_rows(self.tprime)

    def subsample(self, fraction: float, seed: int) -> "TrainData":
        """Keep T' plus a seeded sample of the remaining train rows."""
        if fraction >= 1.0:
            return self
        n = len(self.train)
        target = max(len(self.tprime), int(round(fraction * n)))
        rest = np.setdiff1d(np.arange(n), self.tprime)
        rng = rng_for(seed, f"estimate-subsample:{fraction!r}")
        extra = rng.choice(rest, size=target - len(self.tprime), replace=False)
        keep = np.sort(np.concatenate([self.tprime, extra]))
        new_tprime = np.searchsorted(keep, self.tprime)
        return TrainData(self.train_rows(keep), self.holdout, self.test, new_tprime)


def ensure_holdout(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Carve a stratified holdout V out of the train rows if ``ds`` has none."""
    if ds.split_sizes()["holdout"] > 0:
        return ds
    train_idx = ds.indices("train")
    carved = split(ds.rows(train_idx), (1.0 - fraction, fraction), seed)
    tags = ds.splits.copy()
    tags[train_idx] = np.where(carved.splits == TEST, TRAIN, carved.splits)
    return Dataset(ds.features, ds.labels, tags, list(ds.modality_names), dict(ds.meta))


def head_names(net: MultiHeadNet, modality_names: Sequence[str] | None = None) -> list[str]:
    names = list(modality_names) if modality_names else [f"m{i}" for i in range(net.k)]
    return [*names, "fused"]


def evaluate_heads(net: MultiHeadNet, batch: Batch) -> list[tuple[float, float]]:
    """(loss, accuracy) of every head, eval mode."""
    logits, _ = net.forward_all_heads(batch.inputs)
    return [(softmax_cross_entropy(z, batch.labels)[0], accuracy(z, batch.labels)) for z in logits]


@dataclass
class TrainState:
    net: MultiHeadNet
    optimizer: Optimizer
    rng: np.random.Generator
    epoch: int = 0
    curves: dict = field(default_factory=dict)
    names: list = field(default_factory=list)

    def fork(self) -> "TrainState":
        return copy.deepcopy(self)


def new_state(net: MultiHeadNet, config: TrainConfig, stream: str = "train",
              names: Sequence[str] | None = None) -> TrainState:
    return TrainState(net, config.optimizer.build(), rng_for(config.seed, stream),
                      names=head_names(net, names))


def log_records(state: TrainState, data: TrainData) -> None:
    train_metrics = evaluate_heads(state.net, data.tprime_batch())
    val_metrics = evaluate_heads(state.net, data.holdout)
    for name, (tl, ta), (vl, va) in zip(state.names, train_metrics, val_metrics):
        state.curves.setdefault(name, []).append(
            CheckpointRecord(state.epoch, tl, vl, ta, va, source=name))


def train_epochs(state: TrainState, data: TrainData, weights: BlendWeights, epochs: int,
                 config: TrainConfig) -> TrainState:
    """Minibatch training on the blended loss; logs one record per head per epoch."""
    net = state.net
    if len(weights) != net.n_heads:
        raise ValueError(f"need {net.n_heads} weights, got {len(weights)}")
    if not state.curves:
        log_records(state, data)
    params = net.params()
    n = len(data.train)
    for _ in range(epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = data.train_rows(order[start:start + config.batch_size])
            logits, cache = net.forward_all_heads(batch.inputs, True, state.rng)
            _, _, grads = blended_loss(logits, batch.labels, weights)
            try:
                state.optimizer.step(params, net.backward_blended(cache, grads, weights))
            except NumericError as exc:
                raise NumericError(f"epoch {state.epoch + 1}: {exc}") from exc
        state.epoch += 1
        log_records(state, data)
    return state


# -- weight estimation ------------------------------------------------------------------

@dataclass
class Estimate:
    weights: BlendWeights
    measurements: list
    epoch: int
    length: int

    def record(self) -> dict:
        return dict(weight_record(self.epoch, self.measurements, self.weights), length=self.length)


def gb_estimate(net: MultiHeadNet, data: TrainData, n: int, config: TrainConfig, tag: str = "0",
                names: Sequence[str] | None = None, epoch: int = 0) -> Estimate:
    """Train a clone of each head's sub-network alone for ``n`` epochs and
    weight heads by G / O^2 measured on (T', V). ``net`` is not modified."""
    if n < 1:
        raise ValueError("estimation length must be at least one epoch")
    est_data = data.subsample(config.estimate_fraction, config.seed)
    labels = head_names(net, names)
    measurements = []
    for i in range(net.n_heads):
        clone = net.copy()
        st = TrainState(clone, config.optimizer.build(),
                        rng_for(config.seed, f"estimate:{tag}:head:{i}"), names=labels)
        train_epochs(st, est_data, BlendWeights.one_hot(net.n_heads, i), n, config)
        curve = st.curves[labels[i]]
        rep = ogr_between(curve[0], curve[-1], config.metric_kind)
        measurements.append(HeadMeasurement(labels[i], rep.delta_g, rep.delta_o))
        log.debug("estimate %s head %s: G=%.4g O=%.4g", tag, labels[i], rep.delta_g, rep.delta_o)
    return Estimate(estimate_weights_practical(measurements), measurements, epoch, n)


Estimator = Callable[..., Estimate]


@dataclass
class RunResult:
    mode: str
    state: TrainState
    eval_head: int
    schedule: list = field(default_factory=list)  # (start_epoch, BlendWeights)
    estimates: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def net(self) -> MultiHeadNet:
        return self.state.net

    def metrics(self, data: TrainData) -> dict:
        out = {}
        parts = [("train", data.train), ("val", data.holdout), ("test", data.test)]
        for name, batch in parts:
            if batch is None:
                continue
            loss, acc = evaluate_heads(self.net, batch)[self.eval_head]
            out[f"{name}_loss"] = loss
            out[f"{name}_acc"] = acc
        return out


def offline_gblend(net0: MultiHeadNet, data: TrainData, config: TrainConfig,
                   names: Sequence[str] | None = None, estimator: Estimator = gb_estimate) -> RunResult:
    """Estimate weights once from the initial model, then train with them."""
    N = config.epochs
    est = estimator(net0, data, N, config, tag="0", names=names, epoch=0)
    state = new_state(net0.copy(), config, names=names)
    train_epochs(state, data, est.weights, N, config)
    return RunResult("offline-gblend", state, net0.k, [(0, est.weights)], [est])


def online_schedule(epochs: int, super_epoch: int, warmup: int) -> list[tuple[int, int]]:
    """(start_epoch, length) for each super-epoch; warmup first, last one may be short."""
    out, start = [], 0
    while start < epochs:
        length = min(warmup if not out else super_epoch, epochs - start)
        out.append((start, length))
        start += length
    return out


def online_gblend(net0: MultiHeadNet, data: TrainData, config: TrainConfig,
                  names: Sequence[str] | None = None, estimator: Estimator = gb_estimate,
                  on_super_epoch: Callable | None = None) -> RunResult:
    """Re-estimate weights from the current checkpoint at each super-epoch.

    ``on_super_epoch(state, estimate, length)`` is called with the checkpoint
    before each super-epoch is trained.
    """
    state = new_state(net0.copy(), config, names=names)
    result = RunResult("online-gblend", state, net0.k)
    for s, (start, length) in enumerate(online_schedule(config.epochs, config.super_epoch, config.warmup)):
        est = estimator(state.net, data, length, config, tag=str(s), names=names, epoch=start)
        if on_super_epoch is not None:
            on_super_epoch(state, est, length)
        if result.schedule and est.weights != result.schedule[-1][1]:
            # momentum built under the old blend would keep moving heads the
            # new blend no longer trains, so the objective change restarts it
            state.optimizer = config.optimizer.build()
        result.schedule.append((start, est.weights))
        result.estimates.append(est)
        train_epochs(state, data, est.weights, length, config)
    return result


def baseline(kind: str, net0: MultiHeadNet, data: TrainData, config: TrainConfig,
             modality: int = 0, names: Sequence[str] | None = None) -> RunResult:
    N, heads = config.epochs, net0.n_heads
    if kind == "uni_modal":
        if not 0 <= modality < net0.k:
            raise ValueError(f"modality {modality} out of range")
        w, eval_head, net = BlendWeights.one_hot(heads, modality), modality, net0.copy()
    elif kind == "naive_joint":
        w, eval_head, net = BlendWeights.one_hot(heads, heads - 1), heads - 1, net0.copy()
    elif kind == "equal_weights":
        w, eval_head, net = BlendWeights.uniform(heads), heads - 1, net0.copy()
    elif kind == "dropout":
        w, eval_head = BlendWeights.one_hot(heads, heads - 1), heads - 1
        net = net0.with_dropout(config.dropout_rate)
    elif kind == "pretrain_finetune":
        net = net0.copy()
        for i in range(net.k):
            st = new_state(net, config, stream=f"pretrain:{i}", names=names)
            train_epochs(st, data, BlendWeights.one_hot(heads, i), N, config)
        w, eval_head = BlendWeights.one_hot(heads, heads - 1), heads - 1
    else:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    state = new_state(net, config, names=names)
    train_epochs(state, data, w, N, config)
    return RunResult(kind, state, eval_head, [(0, w)])
