"""Closed-form checks of how KL between representation densities behaves under linear maps.

For Gaussians every quantity has a closed form: an invertible map G leaves KL
unchanged, a rank-reducing map can only shrink it (data processing). The
experiment measures both regimes with G rescaled to spectral norm 1.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

EQUALITY_TOL = 1e-8
DPI_TOL = 1e-10


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ValueError("covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        diff = np.atleast_2d(x) - self.mean
        _, logdet = np.linalg.slogdet(self.covariance)
        maha = np.sum(diff * np.linalg.solve(self.covariance, diff.T).T, axis=1)
        return -0.5 * (maha + logdet + self.dim * np.log(2.0 * np.pi))


def gaussian_kl(a: GaussianDensity, b: GaussianDensity) -> float:
    """KL(a || b) = 1/2 (tr(Sb^-1 Sa) + dmu^T Sb^-1 dmu - d + ln det Sb - ln det Sa)"""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch {a.dim} vs {b.dim}")
    diff = b.mean - a.mean
    trace = np.trace(np.linalg.solve(b.covariance, a.covariance))
    maha = float(diff @ np.linalg.solve(b.covariance, diff))
    _, logdet_a = np.linalg.slogdet(a.covariance)
    _, logdet_b = np.linalg.slogdet(b.covariance)
    return float(0.5 * (trace + maha - a.dim + logdet_b - logdet_a))


def pushforward(g_matrix: np.ndarray, a: GaussianDensity) -> GaussianDensity:
    """Density of G x for x ~ a: N(G mu, G S G^T)"""
    G = np.atleast_2d(np.asarray(g_matrix, dtype=np.float64))
    if G.shape[1] != a.dim:
        raise ValueError(f"map of shape {G.shape} cannot act on dimension {a.dim}")
    if np.linalg.matrix_rank(G) < G.shape[0]:
        raise NumericError(f"map of shape {G.shape} is rank deficient; pushforward would be degenerate")
    cov = G @ a.covariance @ G.T
    return GaussianDensity(G @ a.mean, 0.5 * (cov + cov.T))


def gaussian_kl_monte_carlo(a: GaussianDensity, b: GaussianDensity, samples: int,
                            rng: np.random.Generator) -> Tuple[float, float]:
    """Sample estimate of KL(a || b) and its standard error"""
    x = rng.multivariate_normal(a.mean, a.covariance, size=samples)
    ratio = a.log_density(x) - b.log_density(x)
    return float(ratio.mean()), float(ratio.std(ddof=1) / np.sqrt(samples))


def random_spd(dim: int, rng: np.random.Generator) -> np.ndarray:
    factor = rng.normal(size=(dim, dim))
    cov = factor @ factor.T + 0.5 * np.eye(dim)
    return 0.5 * (cov + cov.T)


def random_orthogonal(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def random_unit_norm_map(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """rows x cols matrix with singular values in [0.2, 1] and largest exactly 1"""
    k = min(rows, cols)
    singular = rng.uniform(0.2, 1.0, size=k)
    singular[np.argmax(singular)] = 1.0
    left = random_orthogonal(rows, rng)[:, :k]
    right = random_orthogonal(cols, rng)[:k, :]
    return left @ np.diag(singular) @ right


def _relation(before: float, after: float, tol: float) -> str:
    if abs(after - before) <= tol:
        return "equal"
    return "decrease" if after < before else "increase"


def lipschitz_bound_experiment(dim: int, trials: int, rng: np.random.Generator) -> pd.DataFrame:
    """One row per trial: KL of two random Gaussians before and after unit-norm linear maps.

    Columns: trial, dim, out_dim, det_abs, kl_repr, kl_output, relation,
    kl_projected, projected_relation, passed. The invertible map must preserve KL
    within 1e-8; the rank-reducing map (dim -> dim - 1) must not increase it by more
    than 1e-10. For dim = 1 there is no rank-reducing map and those columns are empty.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    rows = []
    for trial in range(trials):
        before = GaussianDensity(rng.normal(size=dim), random_spd(dim, rng))
        after = GaussianDensity(rng.normal(size=dim), random_spd(dim, rng))
        kl_repr = gaussian_kl(before, after)

        G = random_unit_norm_map(dim, dim, rng)
        kl_output = gaussian_kl(pushforward(G, before), pushforward(G, after))
        relation = _relation(kl_repr, kl_output, EQUALITY_TOL)
        passed = relation == "equal"

        kl_projected, projected_relation = float("nan"), ""
        if dim > 1:
            P = random_unit_norm_map(dim - 1, dim, rng)
            kl_projected = gaussian_kl(pushforward(P, before), pushforward(P, after))
            projected_relation = _relation(kl_repr, kl_projected, DPI_TOL)
            passed = passed and kl_projected <= kl_repr + DPI_TOL

        rows.append({"trial": trial, "dim": dim, "out_dim": dim - 1 if dim > 1 else None,
                     "det_abs": abs(float(np.linalg.det(G))), "kl_repr": kl_repr, "kl_output": kl_output,
                     "relation": relation, "kl_projected": kl_projected,
                     "projected_relation": projected_relation, "passed": passed})
        if not passed:
            logger.error("theory trial %d failed: kl_repr %.12g kl_output %.12g kl_projected %.12g",
                         trial, kl_repr, kl_output, kl_projected)
    return pd.DataFrame(rows)


def gaussian_self_test(dim: int, samples: int, rng: np.random.Generator) -> pd.DataFrame:
    """Hand cases plus a Monte-Carlo cross-check of the closed form"""
    one = np.ones((1, 1))
    cases = [
        ("identical", gaussian_kl(GaussianDensity([0.0], one), GaussianDensity([0.0], one)), 0.0),
        ("shifted_mean", gaussian_kl(GaussianDensity([0.0], one), GaussianDensity([1.0], one)), 0.5),
        ("scaled_variance", gaussian_kl(GaussianDensity([0.0], one), GaussianDensity([0.0], 4 * one)),
         0.5 * (0.25 - 1.0 + np.log(4.0))),
    ]
    rows = [{"check": name, "value": value, "expected": expected, "stderr": 0.0,
             "passed": abs(value - expected) <= 1e-9} for name, value, expected in cases]
    a = GaussianDensity(rng.normal(size=dim), random_spd(dim, rng))
    b = GaussianDensity(rng.normal(size=dim), random_spd(dim, rng))
    exact = gaussian_kl(a, b)
    estimate, stderr = gaussian_kl_monte_carlo(a, b, samples, rng)
    rows.append({"check": "monte_carlo", "value": estimate, "expected": exact, "stderr": stderr,
                 "passed": abs(estimate - exact) <= 3.0 * stderr})
    return pd.DataFrame(rows)
