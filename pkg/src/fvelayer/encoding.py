"""Fisher vector encoding of an unordered feature set and its exact
analytic gradient with respect to the inputs."""
from __future__ import annotations

import numpy as np

from .data import DimensionMismatchError, FeatureBatch, reduce_rows
from .gmm import DiagGmm, soft_assign


class EmptyGroupError(ValueError):
    pass


def fv_length(gmm: DiagGmm) -> int:
    return 2 * gmm.k * gmm.dim


def fv_column_names(gmm: DiagGmm) -> list[str]:
    """Column labels in layout order: all mean blocks, then all
    deviation blocks, component-major."""
    names = [f"mu_k{k}_d{d}" for k in range(gmm.k) for d in range(gmm.dim)]
    names += [f"sigma_k{k}_d{d}" for k in range(gmm.k) for d in range(gmm.dim)]
    return names


def _prepare(gmm: DiagGmm, x: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] < 1:
        raise EmptyGroupError("cannot encode an empty feature set")
    if x.shape[1] != gmm.dim:
        raise DimensionMismatchError(f"expected D={gmm.dim}, got {x.shape[1]}")
    w = soft_assign(gmm, x).assign                      # (N, K)
    sigma = gmm.sigmas                                  # (K, D)
    z = (x[:, None, :] - gmm.means[None, :, :]) / sigma[None, :, :]   # (N, K, D)
    return x, w, sigma, z


def encode(gmm: DiagGmm, image_set: np.ndarray) -> np.ndarray:
    """Normalized Fisher scores of one image's feature set; length 2KD.

    mean block:      (1/sqrt(N a_k)) sum_n w_nk (x - mu)/sigma
    deviation block: (1/sqrt(2 N a_k)) sum_n w_nk ((x - mu)^2/sigma^2 - 1)
    """
    x, w, _, z = _prepare(gmm, image_set)
    n = x.shape[0]
    a_mu = 1.0 / np.sqrt(n * gmm.weights)               # (K,)
    a_sig = 1.0 / np.sqrt(2.0 * n * gmm.weights)
    f_mu = a_mu[:, None] * reduce_rows(w[:, :, None] * z)
    f_sig = a_sig[:, None] * reduce_rows(w[:, :, None] * (z * z - 1.0))
    return np.concatenate([f_mu.ravel(), f_sig.ravel()])


def encode_groups(gmm: DiagGmm, batch: FeatureBatch) -> tuple[np.ndarray, np.ndarray]:
    """Encode every group of a batch; returns (group_ids, G x 2KD matrix)."""
    gids = batch.group_ids()
    out = np.stack([encode(gmm, batch.data[batch.groups == g]) for g in gids])
    return gids, out


def encode_vjp(gmm: DiagGmm, image_set: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of encode: gradient of <upstream, F> with
    respect to the inputs, shape (N, D). GMM parameters are constants.

    Never materializes the Jacobian; cost is O(N K D). Cross-sample terms
    vanish because row n only enters F through its own summand.
    """
    x, w, sigma, z = _prepare(gmm, image_set)
    n, d = x.shape
    k = gmm.k
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (2 * k * d,):
        raise DimensionMismatchError(f"upstream must have length {2 * k * d}")
    u_mu = upstream[: k * d].reshape(k, d)
    u_sig = upstream[k * d:].reshape(k, d)
    a_mu = 1.0 / np.sqrt(n * gmm.weights)
    a_sig = 1.0 / np.sqrt(2.0 * n * gmm.weights)

    # s[n,k]: coefficient multiplying dw_nk/dx in the chained upstream
    s = np.einsum("kd,nkd->nk", a_mu[:, None] * u_mu, z)
    s += np.einsum("kd,nkd->nk", a_sig[:, None] * u_sig, z * z - 1.0)

    # direct (Kronecker-delta) terms
    grad = np.einsum("nk,kd->nd", w, a_mu[:, None] * u_mu / sigma)
    grad += np.einsum("nk,nkd->nd", w, 2.0 * (a_sig[:, None] * u_sig)[None, :, :] * z / sigma[None, :, :])

    # soft-assignment derivative: dw_nk/dx_nd = w_nk (-g_nkd + sum_l w_nl g_nld)
    g = z / sigma[None, :, :]                            # (x - mu) / sigma^2
    gbar = np.einsum("nk,nkd->nd", w, g)
    ws = w * s
    grad += np.einsum("nk,nd->nd", ws, gbar) - np.einsum("nk,nkd->nd", ws, g)
    return grad


def jacobian_analytic(gmm: DiagGmm, image_set: np.ndarray) -> np.ndarray:
    """Full (2KD) x (N*D) Jacobian assembled from encode_vjp rows.
    Testing helper only."""
    x = np.atleast_2d(np.asarray(image_set, dtype=np.float64))
    m = fv_length(gmm)
    rows = []
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        rows.append(encode_vjp(gmm, x, e).ravel())
    return np.asarray(rows)


def jacobian_fd(gmm: DiagGmm, image_set: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of encode, shape (2KD) x (N*D).
    Oracle for the analytic backward pass; never used on the hot path."""
    x = np.atleast_2d(np.asarray(image_set, dtype=np.float64))
    n, d = x.shape
    cols = []
    for i in range(n):
        for j in range(d):
            xp = x.copy()
            xm = x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            cols.append((encode(gmm, xp) - encode(gmm, xm)) / (2.0 * eps))
    return np.asarray(cols).T


def normalize_fv(fv: np.ndarray, apply_power: bool = False, apply_l2: bool = False) -> np.ndarray:
    """Optional signed square root then L2 normalization; only used on
    the conventional-pipeline path, never inside the layer."""
    out = np.asarray(fv, dtype=np.float64).copy()
    if apply_power:
        out = np.sign(out) * np.sqrt(np.abs(out))
    if apply_l2:
        norm = np.linalg.norm(out)
        if norm >= 1e-12:
            out = out / norm
    return out
