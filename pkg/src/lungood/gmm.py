"""Gaussian mixture density models fit by expectation-maximization.

Full covariances with a ridge added every M-step keep each component SPD;
all responsibilities and densities go through log-sum-exp so small mixture
weights cannot underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encode import EmbeddingSet


@dataclass
class EmConfig:
    max_iters: int = 200
    rel_tolerance: float = 1e-6
    ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tolerance <= 0 or self.ridge <= 0:
            raise ValueError("tolerances must be > 0")


@dataclass
class GmmModel:
    """Mixture of k full-covariance Gaussians in R^d."""

    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d, d)

    def __post_init__(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("mixture weights must sum to 1")
        self._chol = np.stack([np.linalg.cholesky(c) for c in self.covariances])

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_parameters(self) -> int:
        d = self.d
        return (self.k - 1) + self.k * d + self.k * d * (d + 1) // 2

    def log_density(self, z: np.ndarray) -> float | np.ndarray:
        return gmm_log_density(self, z)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _component_log_densities(means: np.ndarray, chols: np.ndarray, X: np.ndarray) -> np.ndarray:
    """(n, k) matrix of log N(x; mu_j, Sigma_j) via Cholesky solves."""
    n, d = X.shape
    k = len(means)
    out = np.empty((n, k))
    const = -0.5 * d * np.log(2.0 * np.pi)
    for j in range(k):
        L = chols[j]
        sol = np.linalg.solve(L, (X - means[j]).T)
        maha = np.sum(sol**2, axis=0)
        log_det = np.sum(np.log(np.diag(L)))
        out[:, j] = const - log_det - 0.5 * maha
    return out


def gmm_log_density(model: GmmModel, z: np.ndarray) -> float | np.ndarray:
    """log sum_j pi_j N(z; mu_j, Sigma_j); accepts one vector or (n, d) rows."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    X = z.reshape(1, -1) if single else z
    if X.shape[1] != model.d:
        raise ValueError(f"dimension mismatch: model d={model.d}, input d={X.shape[1]}")
    comp = _component_log_densities(model.means, model._chol, X) + np.log(model.weights)[None, :]
    out = _logsumexp(comp, axis=1)
    return float(out[0]) if single else out


def _kmeanspp_centers(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(
            np.sum((X[:, None, :] - np.asarray(centers)[None, :, :]) ** 2, axis=2), axis=1
        )
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(X[int(rng.choice(n, p=probs))])
    return np.asarray(centers)


def _as_normal_matrix(train) -> np.ndarray:
    if isinstance(train, EmbeddingSet):
        if not all(r.normal_flag for r in train.rows):
            raise ValueError("training set must contain normal rows only")
        return train.matrix()
    return np.asarray(train, dtype=np.float64)


def gmm_fit(train, k: int, cfg: EmConfig | None = None) -> tuple[GmmModel, list[float]]:
    """Fit a k-component GMM by EM; returns (model, mean log-likelihood trace).

    Means are seeded with k-means++, covariances start at the ridged sample
    covariance, and every M-step re-adds the ridge so Cholesky factorization
    never fails. Stops when the relative improvement of the mean
    log-likelihood drops below ``rel_tolerance``.
    """
    cfg = cfg or EmConfig()
    X = _as_normal_matrix(train)
    if X.ndim != 2:
        raise ValueError("training data must be an (n, d) matrix")
    n, d = X.shape
    if n < k:
        raise ValueError(f"n < k: need at least {k} rows, got {n}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite training data")

    rng = np.random.default_rng(cfg.seed)
    ridge_eye = cfg.ridge * np.eye(d)
    means = _kmeanspp_centers(X, k, rng)
    base_cov = np.cov(X, rowvar=False, bias=True).reshape(d, d) + ridge_eye
    covs = np.repeat(base_cov[None, :, :], k, axis=0)
    weights = np.full(k, 1.0 / k)

    trace: list[float] = []
    prev = -np.inf
    for _ in range(cfg.max_iters):
        chols = np.stack([np.linalg.cholesky(c) for c in covs])
        log_comp = _component_log_densities(means, chols, X) + np.log(weights)[None, :]
        log_norm = _logsumexp(log_comp, axis=1)
        mean_ll = float(log_norm.mean())
        trace.append(mean_ll)
        if np.isfinite(prev) and mean_ll - prev <= cfg.rel_tolerance * max(1.0, abs(prev)):
            break
        prev = mean_ll

        resp = np.exp(log_comp - log_norm[:, None])
        nj = resp.sum(axis=0)
        nj = np.maximum(nj, 1e-12)  # guard a component losing every point
        weights = nj / nj.sum()
        means = (resp.T @ X) / nj[:, None]
        for j in range(k):
            diff = X - means[j]
            cov = (resp[:, j][:, None] * diff).T @ diff / nj[j]
            covs[j] = 0.5 * (cov + cov.T) + ridge_eye

    return GmmModel(weights=weights, means=means, covariances=covs), trace
