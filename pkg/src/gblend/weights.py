"""Blend-weight estimators.

``estimate_weights_practical`` turns measured (G, O) pairs into weights
proportional to G / O**2. The two ``optimal_weights_*`` functions are the
closed-form minimizers of the expected squared overfitting-to-generalization
ratio of a blended gradient, given the inner products
``a_k = <grad L*, v_k>`` and the overfitting second moments
``Sigma_kj = E[<grad L^T - grad L*, v_k><grad L^T - grad L*, v_j>]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NumericError, WeightEstimationError
from .fusion import BlendWeights

EPS_O = 1e-6
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class HeadMeasurement:
    head_id: str
    G: float
    O: float


@dataclass
class GradientStats:
    inner: np.ndarray
    sigma2: np.ndarray | None = None
    Sigma: np.ndarray | None = None

    def __post_init__(self):
        self.inner = np.asarray(self.inner, dtype=np.float64)
        if self.sigma2 is not None:
            self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if self.Sigma is not None:
            self.Sigma = np.asarray(self.Sigma, dtype=np.float64)
            if not np.allclose(self.Sigma, self.Sigma.T, rtol=0, atol=1e-12 * np.abs(self.Sigma).max()):
                raise ValueError("Sigma must be symmetric")


def normalize(raw: Sequence[float]) -> BlendWeights:
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ValueError(f"raw scores must be finite and nonnegative: {raw}")
    total = raw.sum()
    if not total > 0:
        raise WeightEstimationError("cannot normalize an all-zero score vector")
    # plain division keeps ties and order intact; the sum is off by a few ulps at most
    return BlendWeights(tuple(raw / total))


def practical_raw_scores(measurements: Sequence[HeadMeasurement], eps_o: float = EPS_O) -> np.ndarray:
    g = np.array([max(m.G, 0.0) for m in measurements])
    o = np.array([max(m.O, eps_o) for m in measurements])
    return g / o ** 2


def estimate_weights_practical(measurements: Sequence[HeadMeasurement],
                               eps_o: float = EPS_O) -> BlendWeights:
    """w_i = max(G_i, 0) / max(O_i, eps_o)^2, normalized to sum to one."""
    if not measurements:
        raise WeightEstimationError("no head measurements")
    raw = practical_raw_scores(measurements, eps_o)
    if not raw.sum() > 0:
        raise WeightEstimationError("no generalizing head: every G_i <= 0")
    return normalize(raw)


def optimal_weights_uncorrelated(stats: GradientStats) -> BlendWeights:
    """w_k proportional to <grad L*, v_k> / sigma_k^2."""
    if stats.sigma2 is None:
        raise ValueError("uncorrelated weights need sigma2")
    if np.any(stats.sigma2 <= 0):
        raise ValueError(f"sigma2 entries must be positive: {stats.sigma2}")
    if stats.sigma2.shape != stats.inner.shape:
        raise ValueError("sigma2 and inner must have the same length")
    return _normalize_signed(stats.inner / stats.sigma2)


def optimal_weights_correlated(stats: GradientStats) -> BlendWeights:
    """w proportional to Sigma^{-1} a."""
    sigma = stats.Sigma
    if sigma is None:
        if stats.sigma2 is None:
            raise ValueError("correlated weights need Sigma or sigma2")
        sigma = np.diag(stats.sigma2)
    if sigma.shape != (len(stats.inner),) * 2:
        raise ValueError("Sigma shape does not match inner")
    cond = np.linalg.cond(sigma)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericError(f"Sigma is singular or ill-conditioned (cond={cond:.3g})")
    return _normalize_signed(np.linalg.solve(sigma, stats.inner))


def _normalize_signed(raw: np.ndarray) -> BlendWeights:
    # the minimizer is only defined up to a positive scale; a negative
    # component means the optimum lies off the simplex
    if np.any(raw < 0):
        raise WeightEstimationError(f"optimal blend has negative components: {raw}")
    return normalize(raw)


def weight_record(epoch: int, measurements: Sequence[HeadMeasurement], weights: BlendWeights,
                  eps_o: float = EPS_O) -> dict:
    raw = practical_raw_scores(measurements, eps_o)
    return {
        "epoch": epoch,
        "heads": [
            {"id": m.head_id, "G": m.G, "O": m.O, "raw": float(r), "weight": w}
            for m, r, w in zip(measurements, raw, weights.weights)
        ],
    }
