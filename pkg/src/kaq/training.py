"""Quantization-aware training of unrolled detectors.

Three modes share one engine:

``fp``
    full-precision network, MSE loss only.
``qat-mse``
    fake-quantized layer outputs with free per-layer step sizes, MSE loss only.
``kaq``
    fake quantization with SNR-dependent step sizes ``alpha / sqrt(snr) + gamma``
    and a Gaussian-kernel MMD^2 term per layer added to the MSE.

Gradients are computed by a hand-written reverse pass over the recorded
:class:`~kaq.nets.ForwardTrace`; quantizers pass gradients straight through inside
their representable range.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import kernel as kern
from .evaluation import demap
from .nets import ForwardTrace, UnfoldedParams, fake_quantizer, forward
from .quantizer import QuantConfig, initial_step_size
from .sim import Dataset, db_to_linear

log = logging.getLogger(__name__)

MODES = ("fp", "qat-mse", "kaq")
MODE_ALIASES = {"off": "fp", "static-qat-mse": "qat-mse"}
ETA_FLOOR = 1e-6
RHO_FLOOR = 1e-6
# Learnables optimized in log space (value = exp(free parameter)).
LOG_PARAMS = ("delta", "alpha", "gamma", "sigma")


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    lr_halving_period: int = 10
    epsilon: float = 0.1
    seed: int = 0
    variant: str = "pgd"
    mode: str = "kaq"
    layers: int = 5
    eta_init: float = 0.1
    lambda_init: float = 0.05
    rho_init: float = 1.0
    bits: int = 8
    dynamic: Optional[bool] = None
    alpha_init: float = 0.25
    gamma_init: Optional[float] = None
    sigma_init: str = "median"
    bandwidths: str = "tied"
    mmd_grad: str = "total"
    calibration_size: int = 512
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        if self.dynamic is None:
            self.dynamic = self.mode == "kaq"
        if int(self.epochs) < 0:
            raise ValueError("epochs must be >= 0")
        if int(self.batch_size) < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if int(self.lr_halving_period) < 1:
            raise ValueError("lr_halving_period must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.bandwidths not in ("tied", "free"):
            raise ValueError("bandwidths must be 'tied' or 'free'")
        if self.mmd_grad not in ("total", "single"):
            raise ValueError("mmd_grad must be 'total' or 'single'")
        if self.dynamic and self.mode == "fp":
            raise ValueError("dynamic step sizes need a quantized mode")
        if self.dynamic and self.gamma_init is None and not 0 < self.alpha_init < 1:
            raise ValueError("alpha_init is the SNR-term share of the calibrated step; it must lie in (0, 1)")
        parse_sigma_init(self.sigma_init)

    @property
    def quantized(self) -> bool:
        return self.mode != "fp"

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** (epoch // self.lr_halving_period)

    def to_dict(self) -> dict:
        return asdict(self)


def parse_sigma_init(spec: str):
    """``"median"`` or ``"fixed:<value>"``; returns None for median."""
    if spec == "median":
        return None
    if isinstance(spec, str) and spec.startswith("fixed:"):
        value = float(spec.split(":", 1)[1])
        if value <= 0:
            raise ValueError("fixed sigma must be > 0")
        return value
    raise ValueError(f"sigma_init must be 'median' or 'fixed:<value>', got {spec!r}")


@dataclass
class TrainState:
    params: UnfoldedParams
    quant: Optional[QuantConfig] = None
    kernel: Optional[kern.KernelParams] = None
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0

    def copy(self) -> "TrainState":
        return TrainState(
            self.params.copy(),
            None if self.quant is None else self.quant.copy(),
            None if self.kernel is None else self.kernel.copy(),
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step,
            self.epoch,
        )

    def learnables(self, mode: str) -> dict:
        """Current values of the parameters trained in ``mode`` (natural scale)."""
        mode = canonical_mode(mode)
        out = {}
        if self.params.variant == "pgd":
            out["eta"] = self.params.eta
        else:
            out["rho"] = self.params.rho
        out["lam"] = self.params.lam
        if mode != "fp":
            if self.quant.dynamic:
                out["alpha"] = self.quant.alpha
                out["gamma"] = self.quant.gamma
            else:
                out["delta"] = self.quant.delta
        if mode == "kaq":
            out["sigma"] = self.kernel.sigma
        return out

    def set_learnable(self, name: str, value: np.ndarray):
        value = np.asarray(value, dtype=float)
        if name == "eta":
            self.params.eta = np.maximum(value, ETA_FLOOR)
        elif name == "rho":
            self.params.rho = np.maximum(value, RHO_FLOOR)
        elif name == "lam":
            self.params.lam = np.maximum(value, 0.0)
        elif name in ("delta", "alpha", "gamma"):
            setattr(self.quant, name, value.copy())
        elif name == "sigma":
            self.kernel.log_sigma = np.log(value)
        else:
            raise KeyError(name)


# --------------------------------------------------------------------------- loss


def _batch_snr(batch: Dataset) -> float:
    tags = np.unique(batch.snr_db)
    if tags.size != 1:
        raise ValueError("a training batch must share one SNR tag")
    return db_to_linear(float(tags[0]))


def run_forward(batch: Dataset, state: TrainState, mode: str, quantizer=fake_quantizer) -> ForwardTrace:
    quant = state.quant if canonical_mode(mode) != "fp" else None
    snr = _batch_snr(batch) if quant is not None and quant.dynamic else None
    return forward(state.params, batch.H, batch.y, quant, snr, quantizer=quantizer)


def total_loss(batch: Dataset, state: TrainState, config: TrainConfig, trace: Optional[ForwardTrace] = None,
               quantizer=fake_quantizer, exact: bool = True):
    """Batch MSE of the network output plus ``epsilon`` times the per-layer MMD^2 sum.

    Returns ``(loss, {"mse": ..., "mmd": ...}, trace)``.
    """
    mode = config.mode
    B = len(batch)
    if mode == "kaq" and B < 2:
        raise ValueError("MMD needs a batch of at least 2 samples")
    if trace is None:
        trace = run_forward(batch, state, mode, quantizer)
    err = batch.x - trace.output
    mse = float(np.sum(err * err)) / B
    mmd = 0.0
    if mode == "kaq":
        for k in range(state.params.K):
            mmd += kern.mmd2(trace.x[k + 1], trace.x_q[k], *state.kernel.layer(k), exact=exact)
    return mse + config.epsilon * mmd, {"mse": mse, "mmd": mmd}, trace


# ----------------------------------------------------------------------- backward


def backward(batch: Dataset, state: TrainState, config: TrainConfig, trace: Optional[ForwardTrace]) -> dict:
    """Reverse pass of :func:`total_loss`; returns gradients keyed like ``state.learnables``."""
    if trace is None:
        raise ValueError("backward needs the forward trace of the batch")
    mode = config.mode
    params = state.params
    K = params.K
    B = len(batch)
    quantized = mode != "fp"
    eps = config.epsilon

    g = {name: np.zeros_like(val) for name, val in state.learnables(mode).items()}
    g_delta = np.zeros(K)

    mmd_fp, mmd_q = [None] * K, [None] * K
    if mode == "kaq":
        total = config.mmd_grad == "total"
        for k in range(K):
            s = state.kernel.layer(k)
            gfp, gq, g1, g2, g3 = kern.mmd2_grads(trace.x[k + 1], trace.x_q[k], *s, total=total)
            mmd_fp[k], mmd_q[k] = eps * gfp, eps * gq
            g["sigma"][:, k] = eps * np.array([g1, g2, g3])

    def through_quantizer(k, g_out):
        """Gradient reaching the full-precision output of layer k (0-based)."""
        if not quantized:
            return g_out
        if mmd_q[k] is not None:
            g_out = g_out + mmd_q[k]
        g_delta[k] = np.sum(trace.codes[k] * g_out)
        g_x = trace.masks[k] * g_out
        if mmd_fp[k] is not None:
            g_x = g_x + mmd_fp[k]
        return g_x

    G = trace.aux["G"]
    g_out = -2.0 / B * (batch.x - trace.output)

    if params.variant == "pgd":
        Hty = trace.aux["Hty"]
        for k in reversed(range(K)):
            g_x = through_quantizer(k, g_out)
            r = trace.r[k]
            active = np.abs(r) > params.lam[k]
            g_r = g_x * active
            g["lam"][k] = -np.sum(g_r * np.sign(r))
            x_in = trace.layer_input(k + 1)
            grad_f = np.einsum("bij,bj->bi", G, x_in) - Hty
            g["eta"][k] = -np.sum(g_r * grad_f)
            g_out = g_r - params.eta[k] * np.einsum("bij,bj->bi", G, g_r)
    else:
        g_u = np.zeros_like(g_out)
        for k in reversed(range(K)):
            rho, lam = params.rho[k], params.lam[k]
            u_prev = trace.aux["u"][k]
            z_in = trace.layer_input(k + 1)
            xk, v, Ainv = trace.aux["xs"][k], trace.aux["v"][k], trace.aux["inv"][k]
            # u_k = u_prev + x_k - out_k
            g_xk = g_u.copy()
            g_uprev = g_u.copy()
            g_z = through_quantizer(k, g_out - g_u)
            tau = lam / rho
            active = np.abs(v) > tau
            g_v = g_z * active
            g_tau = -np.sum(g_v * np.sign(v))
            g["lam"][k] = g_tau / rho
            g_rho = -g_tau * lam / rho**2
            g_xk += g_v
            g_uprev += g_v
            g_b = np.einsum("bij,bj->bi", Ainv, g_xk)
            g_rho += np.sum(g_b * (z_in - u_prev)) - np.sum(g_b * xk)
            g["rho"][k] = g_rho
            g_out = rho * g_b
            g_u = g_uprev - rho * g_b

    if quantized:
        if state.quant.dynamic:
            snr = _batch_snr(batch)
            g["alpha"] = g_delta / math.sqrt(snr)
            g["gamma"] = g_delta.copy()
        else:
            g["delta"] = g_delta
    return g


# --------------------------------------------------------------------------- adam


def adam_step(state: TrainState, grads: dict, lr: float, config: Optional[TrainConfig] = None) -> TrainState:
    """Bias-corrected Adam on every learnable; log-scale learnables are stepped in log space."""
    config = config or TrainConfig()
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    new = state.copy()
    new.step = state.step + 1
    t = new.step
    for name, grad in grads.items():
        value = _current(new, name)
        grad = np.asarray(grad, dtype=float)
        if grad.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        if name in LOG_PARAMS:
            free, grad = np.log(value), grad * value
        else:
            free = value
        m = b1 * new.adam_m.get(name, np.zeros_like(free)) + (1 - b1) * grad
        v = b2 * new.adam_v.get(name, np.zeros_like(free)) + (1 - b2) * grad * grad
        new.adam_m[name], new.adam_v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        free = free - lr * m_hat / (np.sqrt(v_hat) + eps)
        new.set_learnable(name, np.exp(free) if name in LOG_PARAMS else free)
    return new


def _current(state: TrainState, name: str) -> np.ndarray:
    if name == "eta":
        return state.params.eta
    if name == "rho":
        return state.params.rho
    if name == "lam":
        return state.params.lam
    if name == "sigma":
        return state.kernel.sigma
    return getattr(state.quant, name)


# --------------------------------------------------------------------- training


def calibration_subset(dataset: Dataset, size: int) -> Dataset:
    """First ``size`` training samples at the middle SNR tag."""
    tags = np.unique(dataset.snr_db)
    mid = tags[len(tags) // 2]
    idx = np.flatnonzero(dataset.snr_db == mid)[:size]
    return dataset.subset(idx)


def init_state(dataset: Dataset, config: TrainConfig) -> TrainState:
    """Initial learnables plus the calibration pass over full-precision activations."""
    params = UnfoldedParams.uniform(config.variant, config.layers, config.eta_init,
                                    config.lambda_init, config.rho_init)
    state = TrainState(params)
    if not config.quantized:
        return state
    calib = calibration_subset(dataset, config.calibration_size)
    trace = forward(params, calib.H, calib.y)
    K = params.K
    delta = np.array([initial_step_size(trace.x[k + 1], config.bits) for k in range(K)])
    quant = QuantConfig(config.bits, delta, dynamic=bool(config.dynamic))
    if quant.dynamic:
        snr_mid = db_to_linear(float(calib.snr_db[0]))
        if config.gamma_init is None:
            quant.alpha = config.alpha_init * delta * math.sqrt(snr_mid)
            quant.gamma = delta - quant.alpha / math.sqrt(snr_mid)
        else:
            if config.gamma_init <= 0:
                raise ValueError("gamma_init must be > 0")
            quant.gamma = np.full(K, float(config.gamma_init))
            quant.alpha = np.maximum(delta - quant.gamma, 0.0) * math.sqrt(snr_mid)
            if np.any(quant.alpha <= 0):
                raise ValueError("gamma_init exceeds the calibrated step size of some layer")
    state.quant = quant
    if config.mode == "kaq":
        fixed = parse_sigma_init(config.sigma_init)
        if fixed is None:
            sig = np.array([kern.median_bandwidth(trace.x[k + 1]) for k in range(K)])
        else:
            sig = np.full(K, fixed)
        state.kernel = kern.KernelParams.from_sigmas(sig)
    return state


def epoch_batches(dataset: Dataset, config: TrainConfig, epoch: int) -> list:
    """SNR-homogeneous shuffled mini-batches for one epoch (deterministic in seed, epoch)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(config.seed), spawn_key=(0x7EA1, epoch))))
    batches = []
    for tag, idx in sorted(dataset.groups().items()):
        idx = rng.permutation(idx)
        for start in range(0, idx.size, config.batch_size):
            chunk = idx[start:start + config.batch_size]
            if chunk.size >= 2:
                batches.append(chunk)
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(dataset: Dataset, config: TrainConfig, state: Optional[TrainState] = None):
    """Train until ``state.epoch == config.epochs``; returns ``(state, history)``.

    Passing a previously returned state continues that run; the history then
    holds only the newly trained epochs.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if state is None:
        state = init_state(dataset, config)
    else:
        state = state.copy()
    levels = np.asarray(dataset.system.constellation)
    history = []
    for epoch in range(state.epoch, config.epochs):
        lr = config.lr_at(epoch)
        tot = {"loss": 0.0, "mse": 0.0, "mmd": 0.0}
        correct = 0
        seen = 0
        for idx in epoch_batches(dataset, config, epoch):
            batch = dataset.subset(idx)
            loss, parts, trace = total_loss(batch, state, config, exact=False)
            grads = backward(batch, state, config, trace)
            if "sigma" in grads and config.bandwidths == "tied":
                # one shared bandwidth per layer: all three terms get the summed gradient
                grads["sigma"] = np.broadcast_to(grads["sigma"].sum(axis=0), grads["sigma"].shape).copy()
            state = adam_step(state, grads, lr, config)
            n = len(idx)
            tot["loss"] += loss * n
            tot["mse"] += parts["mse"] * n
            tot["mmd"] += parts["mmd"] * n
            correct += int(np.sum(demap(trace.output, levels)[0] == batch.x))
            seen += n
        state.epoch = epoch + 1
        row = {"epoch": epoch + 1, **{k: float(v) / max(seen, 1) for k, v in tot.items()},
               "accuracy": correct / max(seen * dataset.N, 1), "lr": float(lr)}
        history.append(row)
        log.info("epoch %d loss %.6g mse %.6g mmd %.3g acc %.4f", row["epoch"], row["loss"],
                 row["mse"], row["mmd"], row["accuracy"])
    return state, history
