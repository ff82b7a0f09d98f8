"""BER evaluation, symbol demapping, reference detectors and complexity accounting."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

ML_MAX_CANDIDATES = 10**6


# ------------------------------------------------------------------ demapping


def gray_labels(n_levels: int) -> np.ndarray:
    """Gray-code bit labels (MSB first) of ``n_levels`` sorted levels, shape (L, nbits)."""
    nbits = max(1, int(np.ceil(np.log2(n_levels))))
    codes = np.arange(n_levels) ^ (np.arange(n_levels) >> 1)
    return ((codes[:, None] >> np.arange(nbits - 1, -1, -1)) & 1).astype(np.uint8)


def demap_indices(x_hat, constellation) -> np.ndarray:
    """Index of the nearest sorted level per coordinate; ties go to the smaller level."""
    levels = np.asarray(constellation, dtype=float)
    mids = 0.5 * (levels[1:] + levels[:-1])
    return np.searchsorted(mids, np.asarray(x_hat, dtype=float), side="left")


def demap(x_hat, constellation):
    """Snap to the nearest constellation level; returns ``(levels, bits)``.

    ``bits`` has one extra trailing axis holding the Gray label of each level.
    """
    levels = np.asarray(sorted(constellation), dtype=float)
    if levels.size == 0:
        raise ValueError("constellation must be nonempty")
    idx = demap_indices(x_hat, levels)
    return levels[idx], gray_labels(levels.size)[idx]


# ----------------------------------------------------------------- detectors


def ml_oracle(H, y, constellation, N: Optional[int] = None) -> np.ndarray:
    """Exhaustive ML detection ``argmin_x ||y - Hx||^2`` over the constellation grid.

    Works on a single instance or a batch; ties resolve to the lexicographically
    smallest candidate.
    """
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    single = H.ndim == 2
    if single:
        H, y = H[None], y[None]
    N = H.shape[2] if N is None else int(N)
    levels = np.asarray(sorted(constellation), dtype=float)
    n_cand = levels.size ** N
    if n_cand > ML_MAX_CANDIDATES:
        raise ValueError(f"ML search space {levels.size}^{N} exceeds {ML_MAX_CANDIDATES} candidates")
    cands = np.array(list(itertools.product(levels, repeat=N)))
    out = np.empty((H.shape[0], N))
    chunk = max(1, int(2e7 // (n_cand * H.shape[1])))
    for s in range(0, H.shape[0], chunk):
        Hc, yc = H[s:s + chunk], y[s:s + chunk]
        resid = yc[:, :, None] - np.einsum("bmn,cn->bmc", Hc, cands)
        cost = np.einsum("bmc,bmc->bc", resid, resid)
        out[s:s + chunk] = cands[np.argmin(cost, axis=1)]
    return out[0] if single else out


def zero_forcing(H, y) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    rank = np.linalg.matrix_rank(H)
    if np.any(rank < H.shape[-1]):
        raise ValueError("zero-forcing needs a full column rank channel")
    return np.einsum("...nm,...m->...n", np.linalg.pinv(H), y)


def mmse(H, y, noise_to_signal) -> np.ndarray:
    """Linear MMSE estimate ``(H^T H + (sigma^2/Es) I)^-1 H^T y``."""
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    N = H.shape[-1]
    ratio = np.asarray(noise_to_signal, dtype=float)[..., None, None]
    A = np.einsum("...mi,...mj->...ij", H, H) + ratio * np.eye(N)
    b = np.einsum("...mn,...m->...n", H, y)
    return np.linalg.solve(A, b[..., None])[..., 0]


def baseline_detectors(H, y, noise_to_signal=0.0) -> dict:
    return {"zf": zero_forcing(H, y), "mmse": mmse(H, y, noise_to_signal)}


# A detector maps a Dataset to an (S, N) array of estimates.
Detector = Callable[["Dataset"], np.ndarray]  # noqa: F821


def zf_detector(ds) -> np.ndarray:
    return zero_forcing(ds.H, ds.y)


def mmse_detector(ds) -> np.ndarray:
    ratio = ds.noise_variance() / ds.system.symbol_energy
    return mmse(ds.H, ds.y, ratio)


def ml_detector(ds) -> np.ndarray:
    return ml_oracle(ds.H, ds.y, ds.system.constellation)


def random_detector(seed: int = 0) -> Detector:
    def detect(ds):
        rng = np.random.default_rng(seed)
        return rng.choice(np.asarray(ds.system.constellation), size=ds.x.shape)
    return detect


# ------------------------------------------------------------------------ BER


@dataclass
class BerReport:
    detector: str
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def ber(self, snr_db: float) -> float:
        for row in self.rows:
            if row["snr_db"] == snr_db:
                return row["ber"]
        raise KeyError(snr_db)

    def csv_rows(self) -> list:
        return [{"detector": self.detector, "snr_db": r["snr_db"], "ber": r["ber"], "ser": r["ser"],
                 "bits": r["bits_total"]} for r in self.rows]


def evaluate_ber(detector: Detector, dataset, label: str = "detector", config: Optional[dict] = None) -> BerReport:
    """Run ``detector`` on every instance and aggregate bit/symbol errors per SNR tag."""
    levels = np.asarray(dataset.system.constellation)
    x_hat = np.asarray(detector(dataset), dtype=float)
    sym_hat, bits_hat = demap(x_hat, levels)
    _, bits_true = demap(dataset.x, levels)
    bit_err = np.sum(bits_hat != bits_true, axis=(1, 2))
    sym_err = np.sum(sym_hat != dataset.x, axis=1)
    nbits = bits_true.shape[1] * bits_true.shape[2]
    report = BerReport(label, config=dict(config or {}))
    for tag, idx in sorted(dataset.groups().items()):
        be, se = int(bit_err[idx].sum()), int(sym_err[idx].sum())
        bt, st = int(idx.size * nbits), int(idx.size * dataset.N)
        report.rows.append({"snr_db": tag, "bit_errors": be, "bits_total": bt, "ber": be / bt,
                            "symbol_errors": se, "symbols_total": st, "ser": se / st})
    return report


# ----------------------------------------------------------------- complexity


@dataclass
class ComplexityReport:
    detector: str
    mult_adds: int
    activation_bytes: float
    param_bytes: int
    host_seconds: Optional[float] = None

    def csv_row(self) -> dict:
        return {"detector": self.detector, "mult_adds": self.mult_adds,
                "activation_bytes": self.activation_bytes, "param_bytes": self.param_bytes,
                "host_seconds": "" if self.host_seconds is None else self.host_seconds}


def layer_mult_adds(variant: str, M: int, N: int) -> int:
    """Per-layer operation count of one instance.

    PGD: ``Hx`` (MN), ``- y`` (M), ``H^T e`` (MN), ``eta *`` (N), ``x -`` (N),
    soft threshold (N), i.e. ``2MN + M + 3N``.
    ADMM: right-hand side ``Hty + rho (z - u)`` (3N), cached-inverse product (N^2),
    ``x + u`` (N), soft threshold (N), dual update (2N), i.e. ``N^2 + 7N``.
    """
    if variant == "pgd":
        return 2 * M * N + M + 3 * N
    return N * N + 7 * N


def setup_mult_adds(variant: str, M: int, N: int, K: int) -> int:
    """Per-instance work outside the layers: ADMM forms ``H^T H``, ``H^T y`` and K inverses."""
    if variant == "pgd" or K == 0:
        return 0
    return M * N * N + M * N + K * N**3


def count_complexity(params, bits: Optional[int], dims: Sequence[int], label: Optional[str] = None) -> ComplexityReport:
    """Operation and storage counts for one forward pass of one instance.

    Quantization changes the width of the stored layer outputs, not the number
    of operations; activation bytes use a 32-bit float reference.
    """
    M, N = (int(d) for d in dims)
    K = params.K
    variant = params.variant
    ops = K * layer_mult_adds(variant, M, N) + setup_mult_adds(variant, M, N, K)
    width = 32 if bits is None else int(bits)
    act_bytes = K * N * width / 8
    n_scalars = 2 * K + (0 if bits is None else K)
    label = label or (f"{variant}-fp32" if bits is None else f"{variant}-int{bits}")
    return ComplexityReport(label, int(ops), act_bytes, 4 * n_scalars)


def time_forward(params, H, y, quant=None, snr_linear=None, repeats: int = 3) -> float:
    """Best-of-``repeats`` host wall-clock seconds per instance (informational only)."""
    from .nets import forward

    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward(params, H, y, quant, snr_linear)
        best = min(best, time.perf_counter() - t0)
    return best / max(np.shape(H)[0], 1)
