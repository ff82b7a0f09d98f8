"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np


def check_channel_batch(H, y):
    """Coerce ``(H, y)`` to float64 batches ``(B, M, N)`` and ``(B, M)``.

    Returns ``(H, y, single)`` where ``single`` records that a lone instance was promoted.
    """
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    single = H.ndim == 2
    if single:
        H, y = H[None], y[None]
    if H.ndim != 3 or y.ndim != 2:
        raise ValueError(f"expected H of shape (B, M, N) and y of shape (B, M), got {H.shape} and {y.shape}")
    if H.shape[:2] != y.shape:
        raise ValueError(f"H {H.shape} and y {y.shape} disagree on batch size or M")
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(y))):
        raise ValueError("H and y must be finite")
    return H, y, single


def check_snr(snr_db, n: int) -> np.ndarray:
    """Broadcast a scalar or per-instance SNR (dB) to length ``n``."""
    snr = np.asarray(snr_db, dtype=float)
    if snr.ndim == 0:
        snr = np.full(n, float(snr))
    if snr.shape != (n,):
        raise ValueError(f"need one SNR per instance ({n}), got shape {snr.shape}")
    if np.any(np.isnan(snr)):
        raise ValueError("SNR must not be NaN")
    return snr


def check_n_features(N: int, expected: int):
    if N != expected:
        raise ValueError(f"detector was fitted for N={expected}, got N={N}")
