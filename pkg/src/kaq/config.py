"""Run configuration: a YAML tree whose defaults give the 16x16 16-QAM reference setup."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .sim import DEFAULT_SNR_DB, QAM16_LEVELS, ComplexSystem
from .training import TrainConfig, canonical_mode


@dataclass
class SystemSection:
    nt: int = 16
    nr: int = 16
    constellation: list = field(default_factory=lambda: list(QAM16_LEVELS))
    snr_db: list = field(default_factory=lambda: list(DEFAULT_SNR_DB))
    snr_convention: str = "received"


@dataclass
class DataSection:
    count: int = 50_000
    seed: int = 0


@dataclass
class NetSection:
    variant: str = "pgd"
    layers: int = 5
    eta_init: float = 0.1
    lambda_init: float = 0.05
    rho_init: float = 1.0


@dataclass
class QuantSection:
    mode: str = "kaq"
    bits: int = 8
    dynamic: Optional[bool] = None
    alpha_init: float = 0.25
    gamma_init: Optional[float] = None
    epsilon: float = 0.1
    sigma_init: str = "median"
    bandwidths: str = "tied"
    mmd_grad: str = "total"


@dataclass
class TrainSection:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    lr_halving_period: int = 10
    seed: int = 0
    calibration_size: int = 512


@dataclass
class PathsSection:
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    history: Optional[str] = None
    report: Optional[str] = None
    complexity: Optional[str] = None


SECTIONS = {
    "system": SystemSection,
    "data": DataSection,
    "net": NetSection,
    "quant": QuantSection,
    "train": TrainSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    system: SystemSection = field(default_factory=SystemSection)
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    quant: QuantSection = field(default_factory=QuantSection)
    train: TrainSection = field(default_factory=TrainSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, tree: dict | None) -> "RunConfig":
        tree = tree or {}
        unknown = set(tree) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            values = tree.get(name) or {}
            allowed = {f.name for f in fields(section)}
            bad = set(values) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = section(**values)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        self.complex_system()
        self.train_config()
        if int(self.data.count) < 1:
            raise ValueError("count must be >= 1")
        if not self.system.snr_db:
            raise ValueError("snr_db list must be nonempty")

    def complex_system(self) -> ComplexSystem:
        s = self.system
        return ComplexSystem(s.nt, s.nr, tuple(s.constellation), s.snr_convention)

    def train_config(self, mode: Optional[str] = None) -> TrainConfig:
        q, n, t = self.quant, self.net, self.train
        mode = canonical_mode(mode or q.mode)
        # the dynamic switch only applies to kaq; both baselines use static steps
        dynamic = q.dynamic if mode == "kaq" else False
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, lr_halving_period=t.lr_halving_period,
            epsilon=q.epsilon, seed=t.seed, variant=n.variant, mode=mode, layers=n.layers,
            eta_init=n.eta_init, lambda_init=n.lambda_init, rho_init=n.rho_init, bits=q.bits,
            dynamic=dynamic, alpha_init=q.alpha_init, gamma_init=q.gamma_init, sigma_init=q.sigma_init,
            bandwidths=q.bandwidths, mmd_grad=q.mmd_grad, calibration_size=t.calibration_size,
        )


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_dict(yaml.safe_load(fh))


def dump_run_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
