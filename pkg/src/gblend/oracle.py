"""Gradient-space testbed with a known true gradient.

Each trial draws k gradient estimates ``v_k = (a_k / |g*|^2) g* + u_k`` where
the ``u_k`` form a random orthonormal frame orthogonal to the true gradient
``g*``, and a train-gradient remainder ``e = grad L^T - grad L*`` whose
projections onto the frame are ``z ~ N(0, Sigma)``. Hence
``<g*, v_k> = a_k`` in every trial and ``E[<e, v_k><e, v_j>] = Sigma_kj``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateScenarioError
from .fusion import BlendWeights
from .seeding import derive_seed
from .weights import GradientStats, optimal_weights_correlated, optimal_weights_uncorrelated

DENOM_EPS = 1e-12
MAX_REJECT_FRACTION = 0.01
GRID_STEPS = (0.05, 0.02, 0.01)
CHUNK = 8192


@dataclass
class ScenarioSamples:
    """Per-trial overfitting inner products ``X[t, k] = <e_t, v_tk>`` and
    generalization inner products ``D[t, k] = <g*, v_tk>``."""
    X: np.ndarray
    D: np.ndarray

    @property
    def trials(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def second_moments(self) -> np.ndarray:
        return self.X.T @ self.X / self.trials

    def constant_denominators(self) -> bool:
        return bool(np.all(np.ptp(self.D, axis=0) <= 1e-12 * (1.0 + np.abs(self.D[0]))))


def samples_from_vectors(true_grad: np.ndarray, remainder: np.ndarray, estimates: np.ndarray) -> ScenarioSamples:
    """Build samples from explicit vectors: remainder ``[T, d]``, estimates ``[T, k, d]``."""
    X = np.einsum("td,tkd->tk", remainder, estimates)
    D = np.einsum("d,tkd->tk", true_grad, estimates)
    return ScenarioSamples(X, D)


@dataclass
class GradientScenario:
    true_grad: np.ndarray
    inner: np.ndarray
    Sigma: np.ndarray
    trials: int = 100_000
    seed: int = 0
    _samples: ScenarioSamples | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.true_grad = np.asarray(self.true_grad, dtype=np.float64)
        self.inner = np.asarray(self.inner, dtype=np.float64)
        self.Sigma = np.asarray(self.Sigma, dtype=np.float64)
        k = len(self.inner)
        if self.Sigma.shape != (k, k):
            raise ValueError("Sigma must be k x k")
        if k > len(self.true_grad) - 1:
            raise ValueError("need d > k to fit an orthogonal frame")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        eig = np.linalg.eigvalsh(self.Sigma)
        if eig.min() < -1e-10 * max(1.0, eig.max()):
            raise ValueError("Sigma must be positive semi-definite")

    @property
    def k(self) -> int:
        return len(self.inner)

    @property
    def d(self) -> int:
        return len(self.true_grad)

    @property
    def uncorrelated(self) -> bool:
        off = self.Sigma - np.diag(np.diag(self.Sigma))
        return bool(np.all(off == 0.0))

    def stats(self) -> GradientStats:
        return GradientStats(self.inner, np.diag(self.Sigma).copy(), self.Sigma.copy())

    def _complement_basis(self) -> np.ndarray:
        g = self.true_grad / np.linalg.norm(self.true_grad)
        q, _ = np.linalg.qr(np.column_stack([g, np.eye(self.d)]))
        return q[:, 1:self.d]

    def _sqrt_sigma(self) -> np.ndarray:
        vals, vecs = np.linalg.eigh(self.Sigma)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))

    def draw_vectors(self, chunk_index: int, size: int):
        """Vectors for one chunk of trials: (remainder [n, d], estimates [n, k, d])."""
        rng = np.random.default_rng(derive_seed(self.seed, f"oracle-chunk:{chunk_index}"))
        k, d = self.k, self.d
        basis = self._complement_basis()
        frame, _ = np.linalg.qr(rng.standard_normal((size, d - 1, k)))
        u = np.einsum("ij,njk->nik", basis, frame)  # [n, d, k], orthonormal columns, all _|_ g*
        z = rng.standard_normal((size, k)) @ self._sqrt_sigma().T
        r = rng.standard_normal((size, d - 1))
        r -= np.einsum("njk,nk->nj", frame, np.einsum("njk,nj->nk", frame, r))
        e = np.einsum("nik,nk->ni", u, z) + r @ basis.T
        scale = self.inner / (self.true_grad @ self.true_grad)
        v = scale[None, :, None] * self.true_grad[None, None, :] + np.transpose(u, (0, 2, 1))
        return e, v

    def samples(self) -> ScenarioSamples:
        if self._samples is None:
            xs, ds = [], []
            for c, start in enumerate(range(0, self.trials, CHUNK)):
                e, v = self.draw_vectors(c, min(CHUNK, self.trials - start))
                s = samples_from_vectors(self.true_grad, e, v)
                xs.append(s.X)
                ds.append(s.D)
            self._samples = ScenarioSamples(np.concatenate(xs), np.concatenate(ds))
        return self._samples


def _as_samples(source) -> ScenarioSamples:
    return source.samples() if isinstance(source, GradientScenario) else source


@dataclass(frozen=True)
class Ogr2Estimate:
    weights: tuple
    mean: float
    stderr: float
    trials: int
    rejected: int


def empirical_ogr2(source, weights) -> Ogr2Estimate:
    """Monte-Carlo mean of (<e, g_hat> / <g*, g_hat>)^2 with g_hat = sum_k w_k v_k."""
    s = _as_samples(source)
    w = np.asarray(weights.weights if isinstance(weights, BlendWeights) else weights, dtype=np.float64)
    if w.shape != (s.k,):
        raise ValueError(f"expected {s.k} weights")
    num = s.X @ w
    den = s.D @ w
    keep = np.abs(den) >= DENOM_EPS
    rejected = int(s.trials - keep.sum())
    if rejected > MAX_REJECT_FRACTION * s.trials:
        raise DegenerateScenarioError(f"{rejected} of {s.trials} trials have a vanishing denominator")
    vals = (num[keep] / den[keep]) ** 2
    n = len(vals)
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Ogr2Estimate(tuple(w), float(vals.mean()), se, n, rejected)


def simplex_lattice(k: int, step: float) -> np.ndarray:
    """All weight vectors with entries in multiples of ``step`` summing to 1,
    in lexicographic order."""
    m = round(1.0 / step)
    if not math.isclose(m * step, 1.0):
        raise ValueError("1/step must be an integer")
    pts = [(*c, m - sum(c)) for c in itertools.product(range(m + 1), repeat=k - 1) if sum(c) <= m]
    return np.array(pts, dtype=np.float64).reshape(-1, k) / m


def grid_search_simplex(source, step: float = 0.01) -> tuple[BlendWeights, float]:
    """Exhaustive minimization of empirical OGR^2 over the simplex lattice.

    Ties go to the lexicographically smallest weight vector.
    """
    if not any(math.isclose(step, s) for s in GRID_STEPS):
        raise ValueError(f"step must be one of {GRID_STEPS}")
    s = _as_samples(source)
    if s.k > 4:
        raise ValueError("grid search supports at most 4 estimators")
    grid = simplex_lattice(s.k, step)
    if s.constant_denominators():
        # mean of squares == w^T M w for a fixed denominator
        M = s.second_moments()
        den = grid @ s.D[0]
        num = np.einsum("pi,ij,pj->p", grid, M, grid)
        vals = np.where(np.abs(den) >= DENOM_EPS, num / np.where(den == 0, 1.0, den) ** 2, np.inf)
    else:
        vals = np.empty(len(grid))
        for start in range(0, len(grid), 64):
            g = grid[start:start + 64]
            num = s.X @ g.T
            den = s.D @ g.T
            ok = np.abs(den) >= DENOM_EPS
            ratio = np.where(ok, num / np.where(ok, den, 1.0), 0.0) ** 2
            counts = ok.sum(axis=0)
            bad = counts < (1 - MAX_REJECT_FRACTION) * s.trials
            vals[start:start + 64] = np.where(bad, np.inf, ratio.sum(axis=0) / np.maximum(counts, 1))
    best = int(np.argmin(vals))  # argmin returns the first, i.e. lexicographically smallest, minimum
    w = grid[best]
    w[-1] = 1.0 - w[:-1].sum()
    return BlendWeights(tuple(w)), float(vals[best])


# -- scenario factories -----------------------------------------------------------

def random_uncorrelated_scenario(k: int, d: int = 32, trials: int = 100_000, seed: int = 0) -> GradientScenario:
    rng = np.random.default_rng(derive_seed(seed, f"scenario:uncorrelated:{k}"))
    g = rng.standard_normal(d)
    inner = rng.uniform(0.5, 2.0, size=k)
    sigma2 = rng.uniform(0.5, 2.0, size=k)
    return GradientScenario(g, inner, np.diag(sigma2), trials, seed)


def random_correlated_scenario(k: int, d: int = 32, trials: int = 100_000, seed: int = 0,
                               strength: float = 0.6) -> GradientScenario:
    """Sigma with substantial cross terms whose optimal blend stays on the simplex."""
    rng = np.random.default_rng(derive_seed(seed, f"scenario:correlated:{k}"))
    g = rng.standard_normal(d)
    for _ in range(1000):
        inner = rng.uniform(0.5, 2.0, size=k)
        scales = np.sqrt(rng.uniform(0.5, 2.0, size=k))
        f = rng.standard_normal((k, 1))
        corr = strength * (f @ f.T) / (f.T @ f) * k + np.eye(k)
        dinv = 1.0 / np.sqrt(np.diag(corr))
        corr = corr * np.outer(dinv, dinv)
        Sigma = corr * np.outer(scales, scales)
        if np.all(np.linalg.solve(Sigma, inner) > 0.02) and np.abs(corr - np.eye(k)).max() > 0.2:
            return GradientScenario(g, inner, Sigma, trials, seed)
    raise RuntimeError("could not draw a correlated scenario with a simplex optimum")


# -- verification ---------------------------------------------------------------------

def verify_closed_form(scenario: GradientScenario, step: float = 0.01, tol: float = 1e-3,
                        override_weights=None) -> dict:
    """Compare closed-form blends against grid search and equal weights.

    ``override_weights`` replaces both closed forms; used as a negative control.
    """
    stats = scenario.stats()
    if override_weights is not None:
        unc = cor = BlendWeights(tuple(override_weights))
    else:
        unc = optimal_weights_uncorrelated(stats)
        cor = optimal_weights_correlated(stats)
    grid_w, grid_val = grid_search_simplex(scenario, step)
    est_unc = empirical_ogr2(scenario, unc)
    est_cor = empirical_ogr2(scenario, cor)
    est_eq = empirical_ogr2(scenario, BlendWeights.uniform(scenario.k))
    linf = float(np.max(np.abs(np.array(unc.weights) - np.array(grid_w.weights))))
    checks = {
        "correlated_vs_grid": est_cor.mean <= grid_val + tol,
        "correlated_vs_uncorrelated": est_cor.mean <= est_unc.mean + est_unc.stderr,
    }
    if scenario.uncorrelated:
        checks["uncorrelated_vs_grid"] = est_unc.mean <= grid_val + tol
        checks["weights_match_grid"] = linf <= 2 * step + 1e-12
        checks["equal_not_better"] = est_eq.mean >= est_unc.mean - est_unc.stderr
    return {
        "k": scenario.k,
        "d": scenario.d,
        "trials": scenario.trials,
        "seed": scenario.seed,
        "uncorrelated_assumption": scenario.uncorrelated,
        "weights": {"uncorrelated": list(unc.weights), "correlated": list(cor.weights),
                    "grid": list(grid_w.weights), "equal": list(BlendWeights.uniform(scenario.k).weights)},
        "ogr2": {"uncorrelated": est_unc.mean, "correlated": est_cor.mean, "grid": grid_val,
                 "equal": est_eq.mean},
        "stderr": {"uncorrelated": est_unc.stderr, "correlated": est_cor.stderr, "equal": est_eq.stderr},
        "rejected": est_unc.rejected,
        "linf_uncorrelated_vs_grid": linf,
        "checks": checks,
        "passed": all(checks.values()),
    }


@dataclass
class QuadraticLandscape:
    """True loss 0.5 (theta - opt)^T A (theta - opt); train loss adds c^T theta."""
    A: np.ndarray
    optimum: np.ndarray
    c: np.ndarray

    def true_loss(self, theta):
        r = theta - self.optimum
        return 0.5 * r @ self.A @ r

    def train_loss(self, theta):
        return self.true_loss(theta) + self.c @ theta

    def true_grad(self, theta):
        return self.A @ (theta - self.optimum)

    def train_grad(self, theta):
        return self.true_grad(theta) + self.c


def _step_residuals(land: QuadraticLandscape, theta, direction, eta):
    after = theta - eta * direction
    dG = land.true_loss(theta) - land.true_loss(after)
    dO = (land.train_loss(theta) - land.train_loss(after)) - dG
    approx_G = eta * land.true_grad(theta) @ direction
    approx_O = eta * (land.train_grad(theta) - land.true_grad(theta)) @ direction
    return dG, dO, dG - approx_G, dO - approx_O


def taylor_step_check(land: QuadraticLandscape, theta: np.ndarray, eta: float = 1e-3,
                      direction: np.ndarray | None = None) -> dict:
    """Check dG ~ eta<grad L*, g> and dO ~ eta<grad L^T - grad L*, g> for a step
    theta -> theta - eta g, and that halving eta quarters the dG residual."""
    g = land.train_grad(theta) if direction is None else np.asarray(direction, dtype=np.float64)
    dG1, dO1, rG1, rO1 = _step_residuals(land, theta, g, eta)
    dG2, dO2, rG2, rO2 = _step_residuals(land, theta, g, eta / 2)
    ratio = abs(rG1) / abs(rG2) if rG2 != 0 else float("nan")
    o_scale = max(abs(dO1), 1e-300)
    return {
        "eta": eta,
        "delta_G": dG1,
        "delta_O": dO1,
        "residual_G": rG1,
        "residual_G_half": rG2,
        "residual_O": rO1,
        "residual_ratio": ratio,
        "passed": bool(3.5 <= ratio <= 4.5 and abs(rO1) <= 1e-9 * o_scale + 1e-15),
    }


def aggregated_ogr(etas, overfit_inner, general_inner) -> float | None:
    """|sum eta_i <e_i, g_i>| / |sum eta_i <grad L*_i, g_i>| over a trajectory (diagnostic only)."""
    etas = np.asarray(etas, dtype=np.float64)
    num = float(np.sum(etas * np.asarray(overfit_inner)))
    den = float(np.sum(etas * np.asarray(general_inner)))
    if abs(den) < 1e-12:
        return None
    return abs(num / den)
