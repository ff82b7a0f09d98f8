"""Symmetric uniform activation quantizer with SNR-adaptive step sizes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DELTA_FLOOR = 1e-6


def qmax(bits: int) -> int:
    """Largest integer code of a symmetric ``bits``-wide quantizer."""
    if int(bits) < 2:
        raise ValueError("bit width must be >= 2")
    return 2 ** (int(bits) - 1) - 1


def round_half_away(t):
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def quantize_codes(x, delta: float, bits: int) -> np.ndarray:
    """Integer codes ``clamp(round(x / delta))`` as floats."""
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    q = qmax(bits)
    return np.clip(round_half_away(np.asarray(x, dtype=float) / delta), -q, q)


def quantize(x, delta: float, bits: int = 8) -> np.ndarray:
    """Fake-quantize ``x`` onto the lattice ``delta * {-qmax, ..., qmax}``."""
    return delta * quantize_codes(x, delta, bits)


def ste_mask(x, delta: float, bits: int = 8) -> np.ndarray:
    """Straight-through gradient mask: 1 inside the closed representable range."""
    if not delta > 0:
        raise ValueError(f"step size must be positive, got {delta}")
    limit = delta * qmax(bits)
    return (np.abs(np.asarray(x, dtype=float)) <= limit).astype(float)


def initial_step_size(x, bits: int = 8, floor: float = DELTA_FLOOR) -> float:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("cannot calibrate a step size from an empty activation")
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        return floor
    return peak / qmax(bits)


def dynamic_step_size(alpha, gamma, snr_linear):
    """Step size ``alpha * snr**-0.5 + gamma``; raises if it is not positive.

    Works elementwise, so per-layer ``alpha``/``gamma`` vectors give per-layer steps.
    """
    snr_linear = np.asarray(snr_linear, dtype=float)
    if np.any(snr_linear <= 0):
        raise ValueError("snr_linear must be positive")
    delta = np.asarray(alpha, dtype=float) / np.sqrt(snr_linear) + np.asarray(gamma, dtype=float)
    if np.any(delta <= 0):
        raise ValueError(f"dynamic step size is not positive at snr={snr_linear}: {delta}")
    return float(delta) if delta.ndim == 0 else delta


@dataclass
class QuantConfig:
    """Per-layer activation quantizer settings.

    With ``dynamic`` on, the step of layer k is ``alpha[k] / sqrt(snr) + gamma[k]``
    and ``delta`` is only the calibration value; otherwise ``delta`` is used as is.
    """

    bits: int = 8
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dynamic: bool = False

    def __post_init__(self):
        qmax(self.bits)
        self.bits = int(self.bits)
        self.delta = np.asarray(self.delta, dtype=float).copy()
        K = self.delta.size
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=float), (K,)).copy() if np.size(self.alpha) else np.zeros(K)
        self.gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (K,)).copy() if np.size(self.gamma) else np.zeros(K)
        if np.any(self.delta <= 0):
            raise ValueError("all step sizes must be positive")

    @property
    def K(self) -> int:
        return self.delta.size

    def steps(self, snr_linear: float | None = None) -> np.ndarray:
        """Per-layer step sizes to use for a batch at ``snr_linear``."""
        if not self.dynamic:
            return self.delta
        if snr_linear is None:
            raise ValueError("dynamic quantization needs the batch SNR")
        return np.atleast_1d(dynamic_step_size(self.alpha, self.gamma, snr_linear))

    def copy(self) -> "QuantConfig":
        return QuantConfig(self.bits, self.delta.copy(), self.alpha.copy(), self.gamma.copy(), self.dynamic)
