"""Unrolled PGD-Net and ADMM-Net forward passes for l1-regularized least squares.

Both networks operate on batches: ``H`` is (B, M, N) and ``y`` is (B, M).
A forward pass records every intermediate activation in a :class:`ForwardTrace`
so the trainer can run the reverse pass without recomputation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .quantizer import QuantConfig, quantize_codes, ste_mask

VARIANTS = ("pgd", "admm")


@dataclass
class UnfoldedParams:
    """Per-layer learnables: step sizes ``eta``, thresholds ``lam``, ADMM penalties ``rho``."""

    variant: str = "pgd"
    eta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=float)).copy()
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float)).copy()
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float)).copy()
        K = self.lam.size
        if self.variant == "pgd" and self.eta.size != K:
            raise ValueError("eta and lam must both have K entries")
        if self.variant == "admm" and self.rho.size != K:
            raise ValueError("rho and lam must both have K entries")
        if np.any(self.lam < 0):
            raise ValueError("thresholds must be >= 0")
        if self.variant == "pgd" and np.any(self.eta <= 0):
            raise ValueError("step sizes must be > 0")
        if self.variant == "admm" and np.any(self.rho <= 0):
            raise ValueError("ADMM penalties must be > 0")

    @classmethod
    def uniform(cls, variant: str = "pgd", K: int = 5, eta: float = 0.1, lam: float = 0.05,
                rho: float = 1.0) -> "UnfoldedParams":
        K = int(K)
        if variant == "pgd":
            return cls(variant, np.full(K, eta), np.full(K, lam), np.zeros(0))
        return cls(variant, np.zeros(0), np.full(K, lam), np.full(K, rho))

    @property
    def K(self) -> int:
        return self.lam.size

    def copy(self) -> "UnfoldedParams":
        return UnfoldedParams(self.variant, self.eta.copy(), self.lam.copy(), self.rho.copy())


@dataclass
class ForwardTrace:
    """Activations of one batched forward pass.

    ``x[k]`` is the full-precision output of layer k (``x[0]`` is the zero start),
    ``x_q[k-1]`` its quantized version when quantization is on. For ADMM, ``x``
    holds the sparse split variable z, and ``aux`` holds the x-updates, the duals
    and the cached inverses.
    """

    r: list
    x: list
    x_q: Optional[list] = None
    aux: dict = field(default_factory=dict)
    codes: Optional[list] = None
    masks: Optional[list] = None
    deltas: Optional[np.ndarray] = None

    @property
    def output(self) -> np.ndarray:
        if self.x_q is not None and self.x_q:
            return self.x_q[-1]
        return self.x[-1]

    def layer_input(self, k: int) -> np.ndarray:
        """Activation fed into layer k (1-based)."""
        if k == 1 or self.x_q is None:
            return self.x[k - 1]
        return self.x_q[k - 2]


# A quantizer hook maps (activation, step, bits, layer index) to
# (quantized activation, integer codes, STE mask).
QuantizerHook = Callable[[np.ndarray, float, int, int], tuple]


def fake_quantizer(x, delta, bits, k):
    codes = quantize_codes(x, delta, bits)
    return delta * codes, codes, ste_mask(x, delta, bits)


def soft_threshold(r, lam):
    if np.any(np.asarray(lam) < 0):
        raise ValueError("threshold must be >= 0")
    r = np.asarray(r, dtype=float)
    return np.sign(r) * np.maximum(np.abs(r) - lam, 0.0)


def _as_batch(H, y):
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    single = H.ndim == 2
    if single:
        H, y = H[None], y[None]
    if H.ndim != 3 or y.ndim != 2 or H.shape[:2] != y.shape:
        raise ValueError(f"dimension mismatch: H {H.shape}, y {y.shape}")
    return H, y, single


def pgd_layer(x_prev, H, y, eta: float, lam: float):
    """One gradient step on 0.5||y - Hx||^2 followed by soft thresholding."""
    H = np.asarray(H, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if H.shape[-1] != x_prev.shape[-1] or H.shape[-2] != np.shape(y)[-1]:
        raise ValueError(f"dimension mismatch: H {H.shape}, x {x_prev.shape}, y {np.shape(y)}")
    if not eta > 0:
        raise ValueError("step size must be > 0")
    resid = np.einsum("...mn,...n->...m", H, x_prev) - y
    r = x_prev - eta * np.einsum("...mn,...m->...n", H, resid)
    return r, soft_threshold(r, lam)


def admm_factor(H, rho: float) -> np.ndarray:
    """Inverse of ``H^T H + rho I`` (batched)."""
    if not rho > 0:
        raise ValueError("ADMM penalty must be > 0")
    H = np.asarray(H, dtype=float)
    G = np.einsum("...mi,...mj->...ij", H, H)
    A = G + rho * np.eye(H.shape[-1])
    try:
        return np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular ADMM x-update system") from exc


def admm_layer(x_prev, z_prev, u_prev, H, y, rho: float, lam: float, cached_factorization=None):
    """Scaled-form ADMM step for 0.5||y - Hx||^2 + lam||z||_1 subject to x = z.

    ``x_prev`` is accepted for signature symmetry with the PGD layer; the
    x-update depends only on ``z_prev`` and ``u_prev``.
    """
    Ainv = admm_factor(H, rho) if cached_factorization is None else cached_factorization
    Hty = np.einsum("...mn,...m->...n", np.asarray(H, dtype=float), y)
    b = Hty + rho * (z_prev - u_prev)
    x = np.einsum("...ij,...j->...i", Ainv, b)
    z = soft_threshold(x + u_prev, lam / rho)
    u = u_prev + x - z
    return x, z, u


def forward(params: UnfoldedParams, H, y, quant: Optional[QuantConfig] = None,
            snr_linear: Optional[float] = None, quantizer: QuantizerHook = fake_quantizer) -> ForwardTrace:
    """Run all K layers on a batch, optionally fake-quantizing every layer output."""
    H, y, _ = _as_batch(H, y)
    B, _, N = H.shape
    K = params.K
    deltas = None
    if quant is not None:
        if quant.K != K:
            raise ValueError(f"quantizer has {quant.K} layers, network has {K}")
        deltas = quant.steps(snr_linear)
    Hty = np.einsum("bmn,bm->bn", H, y)
    G = np.einsum("bmi,bmj->bij", H, H)

    x0 = np.zeros((B, N))
    trace = ForwardTrace(r=[], x=[x0])
    if quant is not None:
        trace.x_q, trace.codes, trace.masks, trace.deltas = [], [], [], deltas
    if params.variant == "admm":
        trace.aux = {"xs": [], "u": [np.zeros((B, N))], "v": [], "inv": [], "G": G, "Hty": Hty}
    else:
        trace.aux = {"G": G, "Hty": Hty}

    cur = x0
    for k in range(K):
        if params.variant == "pgd":
            grad = np.einsum("bij,bj->bi", G, cur) - Hty
            r = cur - params.eta[k] * grad
            out = soft_threshold(r, params.lam[k])
            trace.r.append(r)
        else:
            u_prev = trace.aux["u"][-1]
            Ainv = np.linalg.inv(G + params.rho[k] * np.eye(N))
            xk = np.einsum("bij,bj->bi", Ainv, Hty + params.rho[k] * (cur - u_prev))
            v = xk + u_prev
            out = soft_threshold(v, params.lam[k] / params.rho[k])
            trace.r.append(v)
            trace.aux["xs"].append(xk)
            trace.aux["v"].append(v)
            trace.aux["inv"].append(Ainv)
        trace.x.append(out)
        if quant is not None:
            xq, codes, mask = quantizer(out, float(deltas[k]), quant.bits, k)
            trace.x_q.append(xq)
            trace.codes.append(codes)
            trace.masks.append(mask)
            out = xq
        if params.variant == "admm":
            trace.aux["u"].append(u_prev + xk - out)
        cur = out
    return trace


def detect(params: UnfoldedParams, H, y, quant: Optional[QuantConfig] = None, snr_linear=None) -> np.ndarray:
    """Network estimate for one instance or a batch.

    With a dynamic quantizer, ``snr_linear`` may be an array with one SNR per
    instance; instances are then grouped by SNR.
    """
    H, y, single = _as_batch(H, y)
    if quant is not None and quant.dynamic and np.ndim(snr_linear) > 0:
        snr = np.asarray(snr_linear, dtype=float)
        out = np.empty((H.shape[0], H.shape[2]))
        for s in np.unique(snr):
            idx = np.flatnonzero(snr == s)
            out[idx] = forward(params, H[idx], y[idx], quant, float(s)).output
    else:
        out = forward(params, H, y, quant, snr_linear).output
    return out[0] if single else out
