"""Mini-batch EM with exponential-moving-average updates and bias
correction: the estimator that makes the encoding layer trainable inside
a batch-wise learning loop."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import COUNT_EPS_FACTOR, VAR_FLOOR
from .data import FeatureBatch, reduce_rows
from .gmm import (
    DiagGmm,
    InitSpec,
    UninitializedEstimatorError,
    initial_gmm,
    soft_assign,
    _m_step,
)

DEFAULT_LAMBDA = 0.9


@dataclass(frozen=True)
class EmaState:
    """Raw EMA accumulators plus the model used for responsibilities
    before the first update.

    Accumulators start at zero; a valid GMM is obtained only through
    bias_corrected(), which divides out the 1 - lambda^t zero-init bias.
    """

    lam: float
    t: int
    acc_weights: np.ndarray     # (K,)
    acc_means: np.ndarray       # (K, D)
    acc_variances: np.ndarray   # (K, D)
    init_gmm: DiagGmm

    @property
    def k(self) -> int:
        return self.acc_means.shape[0]

    @property
    def dim(self) -> int:
        return self.acc_means.shape[1]


def init_streaming(first_batch: FeatureBatch, k: int, lam: float = DEFAULT_LAMBDA,
                   init: InitSpec = InitSpec()) -> EmaState:
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    gmm = initial_gmm(first_batch, k, init)
    d = gmm.dim
    return EmaState(
        lam=float(lam),
        t=0,
        acc_weights=np.zeros(k),
        acc_means=np.zeros((k, d)),
        acc_variances=np.zeros((k, d)),
        init_gmm=gmm,
    )


def batch_estimates(current: DiagGmm, batch: FeatureBatch | np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One M-step restricted to the batch samples.

    Components effectively absent from the batch keep the current mean
    and variance; their weight is still N_k / N_b so weights sum to 1.
    """
    x = batch.data if isinstance(batch, FeatureBatch) else np.asarray(batch, dtype=np.float64)
    resp = soft_assign(current, x)
    alpha, mu, var, counts = _m_step(x, resp.assign)
    dropped = counts < COUNT_EPS_FACTOR * x.shape[0]
    if np.any(dropped):
        mu[dropped] = current.means[dropped]
        var[dropped] = current.variances[dropped]
    return alpha, mu, var


def ema_update(state: EmaState, alpha_new: np.ndarray, mu_new: np.ndarray,
               var_new: np.ndarray) -> EmaState:
    lam = state.lam
    return replace(
        state,
        t=state.t + 1,
        acc_weights=lam * state.acc_weights + (1.0 - lam) * alpha_new,
        acc_means=lam * state.acc_means + (1.0 - lam) * mu_new,
        acc_variances=lam * state.acc_variances + (1.0 - lam) * var_new,
    )


def bias_corrected(state: EmaState) -> DiagGmm:
    """Debiased snapshot: accumulators divided by (1 - lambda^t)."""
    if state.t < 1:
        raise UninitializedEstimatorError("no update performed yet (t = 0)")
    scale = 1.0 - state.lam ** state.t
    weights = state.acc_weights / scale
    drift = weights.sum() - 1.0
    if abs(drift) > 1e-9:
        weights = weights / weights.sum()
    return DiagGmm(
        weights=weights,
        means=state.acc_means / scale,
        variances=np.maximum(state.acc_variances / scale, VAR_FLOOR),
    )


def streaming_step(state: EmaState, batch: FeatureBatch | np.ndarray) -> EmaState:
    """Exactly one E-step and one M-step on the batch, folded into the
    EMA accumulators. Responsibilities come from the init model until
    the first update has happened."""
    current = state.init_gmm if state.t == 0 else bias_corrected(state)
    alpha, mu, var = batch_estimates(current, batch)
    return ema_update(state, alpha, mu, var)
