"""Synthetic multi-modal classification data.

Each modality's columns are laid out as ``[informative | noise | bait]``:

* informative: ``snr * prototype[class] + N(0, 1)``, where the class is the
  true label except with probability ``label_noise`` (then a random class);
* noise: ``N(0, 1)``;
* bait: ``bait_strength * N(0, 1)`` drawn independently per row, carrying no
  label information but letting a network memorize individual training rows.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeding import rng_for

DATASET_FORMAT = "gblend.dataset"
DATASET_VERSION = 1
SPLITS = ("train", "holdout", "test")
TRAIN, HOLDOUT, TEST = 0, 1, 2


@dataclass
class ModalitySpec:
    name: str
    dim: int
    informative_dim: int
    snr: float = 1.0
    label_noise: float = 0.0
    bait_dim: int = 0
    bait_strength: float = 1.0

    def validate(self) -> None:
        if self.dim < 1 or not 0 <= self.informative_dim <= self.dim:
            raise ValueError(f"{self.name}: need 0 <= informative_dim <= dim and dim >= 1")
        if self.bait_dim < 0 or self.informative_dim + self.bait_dim > self.dim:
            raise ValueError(f"{self.name}: informative_dim + bait_dim exceeds dim")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError(f"{self.name}: label_noise must be in [0, 1)")
        if self.snr < 0 or self.bait_strength < 0:
            raise ValueError(f"{self.name}: snr and bait_strength must be nonnegative")


@dataclass
class SyntheticSpec:
    class_count: int
    n_samples: int
    modalities: list
    seed: int = 0
    multi_label: bool = False
    label_rates: list | None = None

    def __post_init__(self):
        self.modalities = [m if isinstance(m, ModalitySpec) else ModalitySpec(**m) for m in self.modalities]

    def validate(self) -> None:
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not self.modalities:
            raise ValueError("need at least one modality")
        for m in self.modalities:
            m.validate()
        if self.multi_label:
            rates = self.label_rates
            if rates is None or len(rates) != self.class_count or any(not 0 < r <= 1 for r in rates):
                raise ValueError("multi_label needs label_rates in (0, 1] for every class")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    features: list
    labels: np.ndarray
    splits: np.ndarray
    modality_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if any(f.shape[0] != n for f in self.features) or len(self.splits) != n:
            raise ValueError("features, labels and splits must have equal row counts")
        if not self.modality_names:
            self.modality_names = [f"m{i}" for i in range(len(self.features))]

    @property
    def multi_label(self) -> bool:
        return self.labels.ndim == 2

    def __len__(self):
        return len(self.labels)

    def rows(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([f[idx] for f in self.features], self.labels[idx], self.splits[idx],
                       list(self.modality_names), dict(self.meta))

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLITS.index(split))

    def part(self, split: str) -> "Dataset":
        return self.rows(self.indices(split))

    def split_sizes(self) -> dict:
        return {name: int(np.sum(self.splits == i)) for i, name in enumerate(SPLITS)}

    def class_volumes(self) -> np.ndarray:
        if self.multi_label:
            return self.labels.sum(axis=0).astype(np.int64)
        return np.bincount(self.labels, minlength=int(self.meta.get("class_count", self.labels.max() + 1)))


def gen_multimodal(spec: SyntheticSpec) -> Dataset:
    """Draw ``spec.n_samples`` rows, all tagged as train (use ``split`` to partition)."""
    spec.validate()
    n, C = spec.n_samples, spec.class_count
    rng = rng_for(spec.seed, "datagen:labels")
    if spec.multi_label:
        labels = (rng.random((n, C)) < np.asarray(spec.label_rates)).astype(np.int8)
        empty = labels.sum(axis=1) == 0
        labels[np.flatnonzero(empty), rng.integers(0, C, size=int(empty.sum()))] = 1
    else:
        labels = rng.integers(0, C, size=n)
    feats = []
    for mi, m in enumerate(spec.modalities):
        mrng = rng_for(spec.seed, f"datagen:modality:{mi}")
        protos = mrng.standard_normal((C, m.informative_dim))
        if m.informative_dim:
            protos /= np.linalg.norm(protos, axis=1, keepdims=True) / np.sqrt(m.informative_dim)
        x = mrng.standard_normal((n, m.dim))
        flip = mrng.random(n) < m.label_noise
        if spec.multi_label:
            seen = labels.astype(np.float64)
            seen[flip] = (mrng.random((int(flip.sum()), C)) < 0.5 / C)
            signal = seen @ protos
        else:
            seen = labels.copy()
            seen[flip] = mrng.integers(0, C, size=int(flip.sum()))
            signal = protos[seen]
        x[:, :m.informative_dim] += m.snr * signal
        bait = slice(m.dim - m.bait_dim, m.dim)
        x[:, bait] *= m.bait_strength
        feats.append(x)
    meta = {"class_count": C, "spec": spec.to_dict()}
    return Dataset(feats, labels, np.zeros(n, dtype=np.int8), [m.name for m in spec.modalities], meta)


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> Dataset:
    """Seeded class-stratified partition into train / holdout / test.

    ``fractions`` lists (train, holdout[, test]); leftover rows go to test.
    """
    fr = list(fractions)
    if len(fr) not in (2, 3) or any(f < 0 for f in fr):
        raise ValueError("fractions must be 2 or 3 nonnegative numbers")
    if sum(fr) > 1.0 + 1e-12:
        raise ValueError(f"fractions sum to {sum(fr)} > 1")
    fr = fr[:2]
    rng = rng_for(seed, "split")
    n = len(dataset)
    tags = np.full(n, TEST, dtype=np.int8)
    strata = dataset.labels if not dataset.multi_label else np.argmax(dataset.labels, axis=1)
    # largest-remainder allocation per class keeps totals within a row of n * fraction
    for c in np.unique(strata):
        idx = np.flatnonzero(strata == c)
        idx = idx[rng.permutation(len(idx))]
        m = len(idx)
        n_train = int(round(fr[0] * m))
        n_hold = int(round((fr[0] + fr[1]) * m)) - n_train
        tags[idx[:n_train]] = TRAIN
        tags[idx[n_train:n_train + n_hold]] = HOLDOUT
    return Dataset(dataset.features, dataset.labels, tags, list(dataset.modality_names), dict(dataset.meta))


def balance_multilabel(dataset: Dataset, min_volume: int, target_volume: int, seed: int) -> Dataset:
    """Sub-sample a multi-label dataset toward ``target_volume`` rows per class.

    Classes with fewer than ``min_volume`` rows are dropped from the label
    space. Rows are visited in a seeded random order; each row's rarest class
    ``c`` in the output so far (ties to the lowest index) decides acceptance:
    draw ``r`` uniformly from ``[0, V_c - V'_c)`` and keep the row iff
    ``r < target_volume - V'_c``, where ``V_c`` is the class volume in the
    filtered source and ``V'_c`` the volume accepted so far.

    RNG protocol: one ``permutation(n)`` then one ``integers(0, V_c - V'_c)``
    per row that still has a label.
    """
    if not dataset.multi_label:
        raise ValueError("balance_multilabel needs multi-hot labels")
    labels = dataset.labels.astype(bool)
    source_volume = labels.sum(axis=0)
    kept_classes = np.flatnonzero(source_volume >= min_volume)
    if len(kept_classes) == 0:
        raise ValueError(f"no class reaches the minimum volume {min_volume}")
    filtered = labels[:, kept_classes]
    V = filtered.sum(axis=0)
    V_out = np.zeros_like(V)
    rng = np.random.default_rng(seed)
    accepted = []
    for row in rng.permutation(len(dataset)):
        classes = np.flatnonzero(filtered[row])
        if len(classes) == 0:
            continue
        c = classes[np.argmin(V_out[classes])]
        r = rng.integers(0, V[c] - V_out[c])
        if r < target_volume - V_out[c]:
            accepted.append(row)
            V_out[classes] += 1
    accepted = np.sort(np.array(accepted, dtype=np.int64))
    out = dataset.rows(accepted)
    out.labels = filtered[accepted].astype(np.int8)
    out.meta = dict(out.meta, kept_classes=kept_classes.tolist(), class_count=len(kept_classes),
                    source_rows=accepted.tolist())
    return out


# -- persistence ------------------------------------------------------------------

def save_dataset(dataset: Dataset, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus raw little-endian arrays.

    Feature files are float64 ``[rows, dim]`` row-major; ``labels.bin`` is
    int64 ``[rows]`` or int8 ``[rows, classes]``; ``splits.bin`` is int8
    (0 train, 1 holdout, 2 test).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    modalities = []
    for i, (name, x) in enumerate(zip(dataset.modality_names, dataset.features)):
        fname = f"modality_{i}.bin"
        x.astype("<f8").tofile(d / fname)
        modalities.append({"name": name, "file": fname, "dtype": "<f8", "shape": list(x.shape)})
    if dataset.multi_label:
        labels, ldtype = dataset.labels.astype("<i1"), "<i1"
    else:
        labels, ldtype = dataset.labels.astype("<i8"), "<i8"
    labels.tofile(d / "labels.bin")
    dataset.splits.astype("<i1").tofile(d / "splits.bin")
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "rows": len(dataset),
        "multi_label": dataset.multi_label,
        "class_count": int(dataset.meta.get("class_count", 0)),
        "modalities": modalities,
        "labels": {"file": "labels.bin", "dtype": ldtype, "shape": list(labels.shape)},
        "splits": {"file": "splits.bin", "dtype": "<i1", "names": list(SPLITS)},
        "split_sizes": dataset.split_sizes(),
        "meta": {k: v for k, v in dataset.meta.items() if k != "class_count"},
        **(extra or {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"{d} is not a version-{DATASET_VERSION} gblend dataset")
    feats = [np.fromfile(d / m["file"], dtype=m["dtype"]).reshape(m["shape"]).astype(np.float64)
             for m in manifest["modalities"]]
    lab = manifest["labels"]
    labels = np.fromfile(d / lab["file"], dtype=lab["dtype"]).reshape(lab["shape"])
    if not manifest["multi_label"]:
        labels = labels.astype(np.int64)
    splits = np.fromfile(d / manifest["splits"]["file"], dtype="<i1")
    meta = dict(manifest.get("meta", {}), class_count=manifest["class_count"])
    return Dataset(feats, labels, splits, [m["name"] for m in manifest["modalities"]], meta)
