"""Synthetic MIMO detection data: Rayleigh channels, QAM symbols and AWGN.

Every instance draws from its own PCG64 stream derived from ``(seed, index)``,
so a dataset can be generated serially, in parallel or in slices and always
comes out identical.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

QAM16_LEVELS = (-3.0, -1.0, 1.0, 3.0)
DEFAULT_SNR_DB = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)

SNR_CONVENTIONS = ("received", "symbol")


@dataclass(frozen=True)
class ComplexSystem:
    """Antenna counts, per-axis constellation levels and SNR convention.

    ``snr_convention="received"`` means SNR = E||Hx||^2 / E||n||^2 (total
    received signal power over total noise power); ``"symbol"`` means
    SNR = Es / sigma^2 per complex receive dimension.
    """

    nt: int = 16
    nr: int = 16
    constellation: tuple = QAM16_LEVELS
    snr_convention: str = "received"

    def __post_init__(self):
        if int(self.nt) < 1 or int(self.nr) < 1:
            raise ValueError("nt and nr must be >= 1")
        levels = tuple(sorted(float(v) for v in self.constellation))
        if not levels:
            raise ValueError("constellation must be nonempty")
        if not np.allclose(levels, [-v for v in reversed(levels)]):
            raise ValueError("constellation must be symmetric about 0")
        if self.snr_convention not in SNR_CONVENTIONS:
            raise ValueError(f"snr_convention must be one of {SNR_CONVENTIONS}")
        object.__setattr__(self, "nt", int(self.nt))
        object.__setattr__(self, "nr", int(self.nr))
        object.__setattr__(self, "constellation", levels)

    @property
    def M(self) -> int:
        return 2 * self.nr

    @property
    def N(self) -> int:
        return 2 * self.nt

    @property
    def symbol_energy(self) -> float:
        """Average energy of one complex symbol (I and Q independent)."""
        return 2.0 * float(np.mean(np.square(self.constellation)))

    def noise_variance(self, snr_linear: float) -> float:
        """Complex noise variance per receive antenna for a linear SNR."""
        if snr_linear == np.inf:
            return 0.0
        if snr_linear <= 0:
            raise ValueError("snr_linear must be positive")
        if self.snr_convention == "symbol":
            return self.symbol_energy / snr_linear
        # Re and Im of each channel entry have variance 1/nr, so E|h|^2 = 2/nr and
        # E||Hx||^2 = nr * nt * Es * 2/nr = 2 nt Es, spread over nr receive antennas.
        return 2.0 * self.nt * self.symbol_energy / (self.nr * snr_linear)


@dataclass(frozen=True)
class MimoInstance:
    H: np.ndarray
    y: np.ndarray
    x_true: np.ndarray
    snr_db: float

    @property
    def snr_linear(self) -> float:
        return db_to_linear(self.snr_db)


@dataclass
class Dataset:
    """A batch of real-valued detection problems stored as stacked arrays.

    ``H`` is (S, M, N), ``y`` is (S, M), ``x`` is (S, N) and ``snr_db`` is (S,).
    """

    H: np.ndarray
    y: np.ndarray
    x: np.ndarray
    snr_db: np.ndarray
    system: ComplexSystem
    seed: int = 0
    snr_list: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        S = self.H.shape[0]
        if self.H.ndim != 3 or self.y.shape != (S, self.H.shape[1]) or self.x.shape != (S, self.H.shape[2]):
            raise ValueError("inconsistent dataset array shapes")
        if self.snr_db.shape != (S,):
            raise ValueError("snr_db must have one entry per instance")

    def __len__(self) -> int:
        return self.H.shape[0]

    def __getitem__(self, i: int) -> MimoInstance:
        return MimoInstance(self.H[i], self.y[i], self.x[i], float(self.snr_db[i]))

    @property
    def M(self) -> int:
        return self.H.shape[1]

    @property
    def N(self) -> int:
        return self.H.shape[2]

    @property
    def snr_linear(self) -> np.ndarray:
        return db_to_linear(self.snr_db)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.H[idx], self.y[idx], self.x[idx], self.snr_db[idx],
                       self.system, self.seed, self.snr_list, dict(self.meta))

    def groups(self) -> dict:
        """Map each SNR tag to the sorted indices of its instances."""
        return {float(s): np.flatnonzero(self.snr_db == s) for s in np.unique(self.snr_db)}

    def noise_variance(self) -> np.ndarray:
        return np.array([self.system.noise_variance(s) for s in self.snr_linear])

    def metadata(self) -> dict:
        return {
            "system": asdict(self.system),
            "seed": int(self.seed),
            "snr_list": [float(s) for s in self.snr_list],
            "count": len(self),
            **self.meta,
        }


def db_to_linear(snr_db):
    out = np.power(10.0, np.asarray(snr_db, dtype=float) / 10.0)
    return float(out) if out.ndim == 0 else out


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent PCG64 stream for instance ``index`` of a dataset seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def embed_complex(Hc, yc):
    """Real-valued equivalent of a complex system ``yc = Hc xc``."""
    Hc = np.asarray(Hc, dtype=complex)
    yc = np.asarray(yc, dtype=complex)
    if Hc.ndim != 2 or yc.ndim != 1 or Hc.shape[0] != yc.shape[0]:
        raise ValueError(f"dimension mismatch: H {Hc.shape}, y {yc.shape}")
    H = np.block([[Hc.real, -Hc.imag], [Hc.imag, Hc.real]])
    return H, embed_vector(yc)


def embed_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    return np.concatenate([v.real, v.imag])


def generate_channel(rng: np.random.Generator, nr: int, nt: int) -> np.ndarray:
    """Rayleigh channel, real and imaginary parts i.i.d. N(0, 1/nr)."""
    if nr < 1 or nt < 1:
        raise ValueError("nr and nt must be >= 1")
    scale = np.sqrt(1.0 / nr)
    re = rng.standard_normal((nr, nt))
    im = rng.standard_normal((nr, nt))
    return scale * (re + 1j * im)


def generate_symbols(rng: np.random.Generator, nt: int, constellation: Sequence[float]) -> np.ndarray:
    levels = np.asarray(constellation, dtype=float)
    if levels.size == 0:
        raise ValueError("constellation must be nonempty")
    i = rng.integers(0, levels.size, size=nt)
    q = rng.integers(0, levels.size, size=nt)
    return levels[i] + 1j * levels[q]


def add_noise(rng: np.random.Generator, Hc, xc, snr_db: float, system: ComplexSystem | None = None):
    """Return ``(yc, snr_linear)`` with complex AWGN calibrated to ``snr_db``.

    ``snr_db = inf`` gives the noiseless received vector.
    """
    Hc = np.asarray(Hc, dtype=complex)
    xc = np.asarray(xc, dtype=complex)
    if np.isnan(snr_db) or snr_db == -np.inf:
        raise ValueError("snr_db must be finite or +inf")
    if system is None:
        system = ComplexSystem(nt=Hc.shape[1], nr=Hc.shape[0])
    snr_linear = db_to_linear(snr_db)
    sigma2 = system.noise_variance(snr_linear)
    nr = Hc.shape[0]
    noise = np.sqrt(sigma2 / 2.0) * (rng.standard_normal(nr) + 1j * rng.standard_normal(nr))
    return Hc @ xc + noise, snr_linear


def generate_instance(seed: int, index: int, system: ComplexSystem, snr_db: float):
    rng = instance_rng(seed, index)
    Hc = generate_channel(rng, system.nr, system.nt)
    xc = generate_symbols(rng, system.nt, system.constellation)
    yc, _ = add_noise(rng, Hc, xc, snr_db, system)
    H, y = embed_complex(Hc, yc)
    return H, y, embed_vector(xc).real


def build_dataset(system: ComplexSystem, count: int, snr_list: Sequence[float], seed: int,
                  start: int = 0) -> Dataset:
    """Generate ``count`` instances; instance ``i`` gets ``snr_list[i % len(snr_list)]``.

    ``start`` offsets the instance index, so ``build_dataset(..., count=n, start=s)``
    equals rows ``s:s+n`` of a larger dataset with the same seed.
    """
    if not isinstance(system, ComplexSystem):
        raise TypeError("system must be a ComplexSystem")
    if int(count) < 1:
        raise ValueError("count must be >= 1")
    snr_list = tuple(float(s) for s in snr_list)
    if not snr_list:
        raise ValueError("snr_list must be nonempty")
    count = int(count)
    H = np.empty((count, system.M, system.N))
    y = np.empty((count, system.M))
    x = np.empty((count, system.N))
    snr = np.empty(count)
    for j in range(count):
        i = start + j
        snr[j] = snr_list[i % len(snr_list)]
        H[j], y[j], x[j] = generate_instance(seed, i, system, snr[j])
    return Dataset(H, y, x, snr, system, int(seed), snr_list)
