"""Kernel-based adaptive quantization (KAQ) for deep-unfolded MIMO detectors."""
from .estimator import UnfoldedDetector
from .evaluation import count_complexity, demap, evaluate_ber, ml_oracle, mmse, zero_forcing
from .kernel import KernelParams, gauss_kernel, mmd2, mmd2_grads
from .nets import UnfoldedParams, admm_layer, forward, pgd_layer, soft_threshold
from .quantizer import QuantConfig, dynamic_step_size, initial_step_size, quantize, ste_mask
from .sim import ComplexSystem, Dataset, build_dataset, embed_complex
from .training import TrainConfig, TrainState, adam_step, backward, total_loss, train

__version__ = "0.1.0"

__all__ = [
    "UnfoldedDetector", "count_complexity", "demap", "evaluate_ber", "ml_oracle", "mmse", "zero_forcing",
    "KernelParams", "gauss_kernel", "mmd2", "mmd2_grads", "UnfoldedParams", "admm_layer", "forward",
    "pgd_layer", "soft_threshold", "QuantConfig", "dynamic_step_size", "initial_step_size", "quantize",
    "ste_mask", "ComplexSystem", "Dataset", "build_dataset", "embed_complex", "TrainConfig", "TrainState",
    "adam_step", "backward", "total_loss", "train",
]
