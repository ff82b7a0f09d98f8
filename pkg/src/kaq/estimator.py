"""scikit-learn style wrapper around the training engine."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import io as kio
from .evaluation import demap
from .nets import detect
from .sim import Dataset, db_to_linear
from .training import TrainConfig, train
from .validation import check_channel_batch, check_n_features, check_snr


class UnfoldedDetector(BaseEstimator):
    """Unrolled PGD-Net / ADMM-Net MIMO detector trained with optional KAQ.

    ``fit`` takes a :class:`~kaq.sim.Dataset`; ``predict`` maps received
    vectors to relaxed symbol estimates, ``predict_symbols`` snaps them to the
    constellation seen during fitting.

    Parameters mirror :class:`~kaq.training.TrainConfig`; ``random_state`` is its seed.
    """

    def __init__(self, variant="pgd", n_layers=5, mode="kaq", bits=8, dynamic=None, eta_init=0.1,
                 lambda_init=0.05, rho_init=1.0, alpha_init=0.25, gamma_init=None, epsilon=0.1,
                 sigma_init="median", bandwidths="tied", epochs=50, batch_size=128, lr=1e-3,
                 lr_halving_period=10, calibration_size=512, random_state=0):
        self.variant = variant
        self.n_layers = n_layers
        self.mode = mode
        self.bits = bits
        self.dynamic = dynamic
        self.eta_init = eta_init
        self.lambda_init = lambda_init
        self.rho_init = rho_init
        self.alpha_init = alpha_init
        self.gamma_init = gamma_init
        self.epsilon = epsilon
        self.sigma_init = sigma_init
        self.bandwidths = bandwidths
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_halving_period = lr_halving_period
        self.calibration_size = calibration_size
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            lr_halving_period=self.lr_halving_period, epsilon=self.epsilon, seed=self.random_state,
            variant=self.variant, mode=self.mode, layers=self.n_layers, eta_init=self.eta_init,
            lambda_init=self.lambda_init, rho_init=self.rho_init, bits=self.bits, dynamic=self.dynamic,
            alpha_init=self.alpha_init, gamma_init=self.gamma_init, sigma_init=self.sigma_init,
            bandwidths=self.bandwidths, calibration_size=self.calibration_size,
        )

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise TypeError("fit expects a kaq.sim.Dataset (channels, received vectors, symbols, SNR tags)")
        self.config_ = self._train_config()
        self.state_, self.history_ = train(X, self.config_)
        self.n_features_in_ = X.N
        self.dims_ = (X.M, X.N)
        self.constellation_ = np.asarray(X.system.constellation)
        return self

    @property
    def quant_(self):
        return self.state_.quant if self.config_.quantized else None

    def predict(self, H, y, snr_db=None):
        """Relaxed estimates for one instance ``(M, N), (M,)`` or a batch."""
        check_is_fitted(self, "state_")
        H, y, single = check_channel_batch(H, y)
        check_n_features(H.shape[2], self.n_features_in_)
        quant = self.quant_
        snr = None
        if quant is not None and quant.dynamic:
            if snr_db is None:
                raise ValueError("a detector with SNR-dependent steps needs snr_db")
            snr = db_to_linear(check_snr(snr_db, H.shape[0]))
        out = detect(self.state_.params, H, y, quant, snr)
        return out[0] if single else out

    def predict_symbols(self, H, y, snr_db=None):
        return demap(self.predict(H, y, snr_db), self.constellation_)[0]

    def score(self, X: Dataset, y=None) -> float:
        """Symbol accuracy on a dataset."""
        sym = self.predict_symbols(X.H, X.y, X.snr_db)
        return float(np.mean(sym == X.x))

    def save(self, path):
        check_is_fitted(self, "state_")
        kio.save_checkpoint(path, self.state_, self.config_, self.dims_,
                            {"history": self.history_, "constellation": self.constellation_.tolist(),
                             "estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> "UnfoldedDetector":
        state, config, header = kio.load_checkpoint(path)
        if "estimator_params" in header:
            est = cls(**header["estimator_params"])
        else:
            est = cls(variant=config.variant, n_layers=config.layers, mode=config.mode, bits=config.bits,
                      dynamic=config.dynamic, eta_init=config.eta_init, lambda_init=config.lambda_init,
                      rho_init=config.rho_init, alpha_init=config.alpha_init, gamma_init=config.gamma_init,
                      epsilon=config.epsilon, sigma_init=config.sigma_init, bandwidths=config.bandwidths,
                      epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
                      lr_halving_period=config.lr_halving_period, calibration_size=config.calibration_size,
                      random_state=config.seed)
        est.config_, est.state_ = config, state
        est.history_ = list(header.get("history", []))
        if header.get("dims"):
            est.dims_ = tuple(header["dims"])
            est.n_features_in_ = est.dims_[1]
        est.constellation_ = np.asarray(header.get("constellation", []), dtype=float)
        return est
