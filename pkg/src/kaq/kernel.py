"""Gaussian-kernel MMD^2 between full-precision and quantized activation batches.

The statistic is the biased V-statistic over all index pairs (including i == j),
with a separate bandwidth for each of its three terms::

    mmd2 = mean K_s1(x_i, x_j) + mean K_s2(q_i, q_j) - 2 mean K_s3(x_i, q_j)
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _check_sigma(*sigmas):
    for s in sigmas:
        if not s > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {s}")


def gauss_kernel(a, b, sigma: float) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    _check_sigma(sigma)
    return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * sigma**2)))


def sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared distances by explicit differencing (no cancellation)."""
    out = np.zeros((A.shape[0], B.shape[0]))
    for k in range(A.shape[1]):
        d = A[:, k, None] - B[None, :, k]
        out += d * d
    return out


def _check_batches(fp, q):
    fp = np.atleast_2d(np.asarray(fp, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if fp.shape != q.shape:
        raise ValueError(f"batch mismatch: {fp.shape} vs {q.shape}")
    return fp, q


def mmd2(fp, q, s1: float, s2: float, s3: float, exact: bool = True) -> float:
    """MMD^2 of two (B, N) batches.

    With ``exact`` each pair sum is accumulated with ``math.fsum``, so the result
    does not depend on sample order and ``mmd2(x, x, s, s, s)`` is exactly zero.
    ``exact=False`` uses numpy's (deterministic, order-dependent) summation.
    """
    fp, q = _check_batches(fp, q)
    _check_sigma(s1, s2, s3)
    B = fp.shape[0]
    total = math.fsum if exact else np.sum
    t1 = total(np.exp(-sq_dists(fp, fp) / (2 * s1**2)).ravel())
    t2 = total(np.exp(-sq_dists(q, q) / (2 * s2**2)).ravel())
    t3 = total(np.exp(-sq_dists(fp, q) / (2 * s3**2)).ravel())
    return (t1 + t2 - 2.0 * t3) / B**2


def mmd2_grads(fp, q, s1: float, s2: float, s3: float, total: bool = True):
    """Gradients of :func:`mmd2` w.r.t. both batches and the three bandwidths.

    Returns ``(g_fp, g_q, g_s1, g_s2, g_s3)``. With ``total=False`` the within-batch
    terms keep only the single-slot partial derivative (half of the total one).
    """
    fp, q = _check_batches(fp, q)
    _check_sigma(s1, s2, s3)
    B = fp.shape[0]
    scale = 1.0 / B**2
    slots = 2.0 if total else 1.0

    D11, D22, D13 = sq_dists(fp, fp), sq_dists(q, q), sq_dists(fp, q)
    K1 = np.exp(-D11 / (2 * s1**2))
    K2 = np.exp(-D22 / (2 * s2**2))
    K3 = np.exp(-D13 / (2 * s3**2))

    # sum_i (a_j - b_i) K_ji  ==  a_j * rowsum(K)_j - (K @ b)_j
    def pull(a, b, K):
        return a * K.sum(axis=1, keepdims=True) - K @ b

    g_fp = scale * (-slots * pull(fp, fp, K1) / s1**2 + 2.0 * pull(fp, q, K3) / s3**2)
    g_q = scale * (-slots * pull(q, q, K2) / s2**2 + 2.0 * pull(q, fp, K3.T) / s3**2)
    g_s1 = scale * np.sum(D11 * K1) / s1**3
    g_s2 = scale * np.sum(D22 * K2) / s2**3
    g_s3 = -2.0 * scale * np.sum(D13 * K3) / s3**3
    return g_fp, g_q, g_s1, g_s2, g_s3


def mmd2_grad_xq(fp, q, s2: float, s3: float, j: int, total: bool = True) -> np.ndarray:
    """Gradient of MMD^2 w.r.t. the j-th quantized sample (s1 does not enter)."""
    return mmd2_grads(fp, q, 1.0, s2, s3, total=total)[1][j]


def mmd2_grad_sigma(fp, q, s1: float, s2: float, s3: float):
    return mmd2_grads(fp, q, s1, s2, s3)[2:]


def median_bandwidth(samples, fallback: float = 1.0) -> float:
    """Median pairwise Euclidean distance between distinct samples."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 2:
        return fallback
    iu = np.triu_indices(samples.shape[0], k=1)
    d = np.sqrt(sq_dists(samples, samples)[iu])
    med = float(np.median(d))
    return med if med > 0 and np.isfinite(med) else fallback


@dataclass
class KernelParams:
    """Per-layer bandwidths for the three MMD terms, stored as logs (shape (3, K))."""

    log_sigma: np.ndarray

    @classmethod
    def from_sigmas(cls, sigma1, sigma2=None, sigma3=None) -> "KernelParams":
        s1 = np.atleast_1d(np.asarray(sigma1, dtype=float))
        s2 = s1 if sigma2 is None else np.atleast_1d(np.asarray(sigma2, dtype=float))
        s3 = s1 if sigma3 is None else np.atleast_1d(np.asarray(sigma3, dtype=float))
        sig = np.stack([s1, s2, s3])
        _check_sigma(*sig.ravel())
        return cls(np.log(sig))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def K(self) -> int:
        return self.log_sigma.shape[1]

    def layer(self, k: int):
        s = self.sigma[:, k]
        return float(s[0]), float(s[1]), float(s[2])

    def copy(self) -> "KernelParams":
        return KernelParams(self.log_sigma.copy())
