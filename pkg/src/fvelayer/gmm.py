"""Diagonal-covariance Gaussian mixtures: densities, soft assignments and
the classical full-batch EM reference estimator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .config import COUNT_EPS_FACTOR, VAR_FLOOR
from .data import DimensionMismatchError, FeatureBatch, reduce_rows

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class DiagGmm:
    """Mixture weights, means and per-dimension variances.

    These are the EM-estimated layer parameters; they never receive
    gradient updates.
    """

    weights: np.ndarray     # (K,)
    means: np.ndarray       # (K, D)
    variances: np.ndarray   # (K, D)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        var = np.asarray(self.variances, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        if mu.ndim != 2 or mu.shape[0] < 1 or mu.shape[1] < 1:
            raise DimensionMismatchError(f"means must be (K, D), got {mu.shape}")
        if w.shape != (mu.shape[0],) or var.shape != mu.shape:
            raise DimensionMismatchError("inconsistent GMM parameter shapes")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("GMM parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if np.any(var < VAR_FLOOR):
            raise ValueError(f"variances must be >= {VAR_FLOOR}")

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.variances)


@dataclass(frozen=True)
class Responsibilities:
    """Row-stochastic soft assignments and per-component effective counts."""

    assign: np.ndarray   # (N, K)
    counts: np.ndarray   # (K,)


@dataclass(frozen=True)
class InitSpec:
    strategy: Literal["random-subset", "kmeans-plus-plus", "provided"] = "random-subset"
    seed: int = 0
    provided: Optional[DiagGmm] = None


@dataclass(frozen=True)
class EmResult:
    gmm: DiagGmm
    loglik_trace: np.ndarray        # mean log-likelihood after each iteration
    reseed_iters: tuple[int, ...]   # iterations where a component was reseeded


class InitializationError(ValueError):
    pass


class UninitializedEstimatorError(RuntimeError):
    pass


def log_density_matrix(gmm: DiagGmm, x: np.ndarray) -> np.ndarray:
    """log p_k(x_n) for all rows and components, shape (N, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != gmm.dim:
        raise DimensionMismatchError(f"expected D={gmm.dim}, got {x.shape[1]}")
    diff = x[:, None, :] - gmm.means[None, :, :]                 # (N, K, D)
    quad = np.sum(diff * diff / gmm.variances[None, :, :], axis=2)
    log_norm = np.sum(0.5 * LOG_2PI + 0.5 * np.log(gmm.variances), axis=1)   # (K,)
    return -0.5 * quad - log_norm[None, :]


def log_component_density(gmm: DiagGmm, x: np.ndarray) -> np.ndarray:
    """Per-component log density of a single feature vector, shape (K,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gmm.dim,):
        raise DimensionMismatchError(f"expected vector of length {gmm.dim}, got {x.shape}")
    return log_density_matrix(gmm, x[None, :])[0]


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def soft_assign(gmm: DiagGmm, batch: FeatureBatch | np.ndarray) -> Responsibilities:
    """Posterior component probabilities per row, computed in log space."""
    x = batch.data if isinstance(batch, FeatureBatch) else np.asarray(batch, dtype=np.float64)
    logw = log_density_matrix(gmm, x) + np.log(gmm.weights)[None, :]
    logw -= _logsumexp(logw, axis=1)[:, None]
    assign = np.exp(logw)
    assign /= assign.sum(axis=1, keepdims=True)   # rows sum to 1 exactly
    counts = reduce_rows(assign)
    return Responsibilities(assign=assign, counts=counts)


def mean_log_likelihood(gmm: DiagGmm, batch: FeatureBatch | np.ndarray) -> float:
    """(1/N) sum_n log sum_k alpha_k p_k(x_n), log-sum-exp stabilized."""
    x = batch.data if isinstance(batch, FeatureBatch) else np.asarray(batch, dtype=np.float64)
    logw = log_density_matrix(gmm, x) + np.log(gmm.weights)[None, :]
    return float(np.mean(_logsumexp(logw, axis=1)))


def _m_step(x: np.ndarray, assign: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Maximum-likelihood re-estimation from soft assignments.

    Returns (alpha, mu, var, counts); variance is the biased weighted
    form (1/N_k), not Bessel-corrected. Empty components are left with
    NaN rows for the caller to resolve.
    """
    n = x.shape[0]
    counts = reduce_rows(assign)                                  # (K,)
    alpha = counts / n
    with np.errstate(invalid="ignore", divide="ignore"):
        mu = reduce_rows(assign[:, :, None] * x[:, None, :]) / counts[:, None]
        diff = x[:, None, :] - mu[None, :, :]
        var = reduce_rows(assign[:, :, None] * diff * diff) / counts[:, None]
    return alpha, mu, var, counts


def initial_gmm(batch: FeatureBatch, k: int, init: InitSpec) -> DiagGmm:
    """Build the starting model for EM per the init strategy.

    random-subset: means are K distinct rows; kmeans-plus-plus: seeded
    D2-weighted center selection. Both use uniform weights and the
    per-dimension batch variance (floored).
    """
    if init.strategy == "provided":
        if init.provided is None:
            raise InitializationError("strategy 'provided' requires a DiagGmm")
        return init.provided
    x = batch.data
    uniq = np.unique(x, axis=0)
    if uniq.shape[0] < k:
        raise InitializationError(f"need at least {k} distinct rows, got {uniq.shape[0]}")
    rng = np.random.default_rng(init.seed)
    if init.strategy == "random-subset":
        idx = rng.choice(uniq.shape[0], size=k, replace=False)
        means = uniq[np.sort(idx)].copy()
    elif init.strategy == "kmeans-plus-plus":
        # greedy k-means++: several D2-sampled candidates per step, keep
        # the one that lowers the potential most
        n_candidates = 2 + int(np.log(k + 1))
        centers = [uniq[rng.integers(uniq.shape[0])]]
        d2 = np.sum((uniq - centers[0]) ** 2, axis=1)
        for _ in range(1, k):
            total = d2.sum()
            if total > 0:
                cand = rng.choice(uniq.shape[0], size=n_candidates, p=d2 / total)
            else:
                cand = rng.choice(uniq.shape[0], size=n_candidates)
            cand_d2 = np.minimum(
                d2[None, :],
                np.sum((uniq[None, :, :] - uniq[cand][:, None, :]) ** 2, axis=2),
            )
            best = np.argmin(cand_d2.sum(axis=1))
            centers.append(uniq[cand[best]])
            d2 = cand_d2[best]
        means = np.asarray(centers)
    else:
        raise InitializationError(f"unknown init strategy {init.strategy!r}")
    # per-dim batch variance shrunk by K^(2/D): each component should
    # start covering roughly 1/K of the data volume, not all of it
    var = np.maximum(np.var(x, axis=0) / k ** (2.0 / x.shape[1]), VAR_FLOOR)
    variances = np.tile(var, (k, 1))
    weights = np.full(k, 1.0 / k)
    return DiagGmm(weights, means, variances)


def em_full(
    batch: FeatureBatch,
    k: int,
    init: InitSpec,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> EmResult:
    """Classical full-batch EM. Stops when the change in per-sample mean
    log-likelihood drops below tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = batch.data
    n = x.shape[0]
    gmm = initial_gmm(batch, k, init)
    trace: list[float] = []
    reseeds: list[int] = []
    count_eps = COUNT_EPS_FACTOR * n
    for it in range(max_iters):
        resp = soft_assign(gmm, batch)
        alpha, mu, var, counts = _m_step(x, resp.assign)
        empty = np.flatnonzero(counts < count_eps)
        if empty.size:
            # reseed: mean <- sample with lowest max responsibility,
            # keep previous variance, give the component one sample's
            # worth of weight and renormalize
            worst = np.argsort(resp.assign.max(axis=1))
            for j, comp in enumerate(empty):
                mu[comp] = x[worst[j % n]]
                var[comp] = gmm.variances[comp]
                alpha[comp] = 1.0 / n
            alpha = alpha / alpha.sum()
            reseeds.append(it)
        var = np.maximum(var, VAR_FLOOR)
        gmm = DiagGmm(alpha, mu, var)
        trace.append(mean_log_likelihood(gmm, batch))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
    return EmResult(gmm=gmm, loglik_trace=np.asarray(trace), reseed_iters=tuple(reseeds))
