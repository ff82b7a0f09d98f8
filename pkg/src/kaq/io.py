"""Binary containers for datasets and training checkpoints.

Both files share one layout::

    magic       8 bytes   b"KAQDSET\\0" or b"KAQCKPT\\0"
    hlen        uint64    little-endian length of the header in bytes
    header      hlen      UTF-8 JSON object (sorted keys), including "version"
    payload     ...       little-endian IEEE-754 float64 values

Dataset payload: one record per instance, in order, each record being
``H`` (M*N, row-major), ``y`` (M), ``x`` (N), ``snr_db`` (1).

Checkpoint payload: the arrays listed in ``header["arrays"]`` concatenated in
that order, each flattened row-major with the listed shape.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .kernel import KernelParams
from .nets import UnfoldedParams
from .quantizer import QuantConfig
from .sim import ComplexSystem, Dataset
from .training import TrainConfig, TrainState

DATASET_MAGIC = b"KAQDSET\0"
CHECKPOINT_MAGIC = b"KAQCKPT\0"
FORMAT_VERSION = 1
LE_F64 = np.dtype("<f8")


class FormatError(ValueError):
    pass


def _pack(magic: bytes, header: dict, payload: np.ndarray) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<Q", len(head)) + head + np.ascontiguousarray(payload, dtype=LE_F64).tobytes()


def _unpack(blob: bytes, magic: bytes):
    if blob[:8] != magic:
        raise FormatError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {header.get('version')}")
    body = blob[16 + hlen:]
    if len(body) % 8:
        raise FormatError("payload is not a whole number of float64 values")
    return header, np.frombuffer(body, dtype=LE_F64).astype(float)


def atomic_write(path, data: bytes):
    """Write ``data`` to ``path`` via a temporary file so no partial file is left behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -------------------------------------------------------------------- dataset


def dataset_to_bytes(ds: Dataset) -> bytes:
    S, M, N = ds.H.shape
    header = {"version": FORMAT_VERSION, "kind": "dataset", "M": M, "N": N, **ds.metadata()}
    records = np.concatenate([ds.H.reshape(S, M * N), ds.y, ds.x, ds.snr_db[:, None]], axis=1)
    return _pack(DATASET_MAGIC, header, records)


def dataset_from_bytes(blob: bytes) -> Dataset:
    header, flat = _unpack(blob, DATASET_MAGIC)
    S, M, N = header["count"], header["M"], header["N"]
    width = M * N + M + N + 1
    if flat.size != S * width:
        raise FormatError(f"expected {S * width} values, found {flat.size}")
    rec = flat.reshape(S, width)
    H = rec[:, :M * N].reshape(S, M, N).copy()
    y = rec[:, M * N:M * N + M].copy()
    x = rec[:, M * N + M:M * N + M + N].copy()
    snr = rec[:, -1].copy()
    system = ComplexSystem(**header["system"])
    known = {"version", "kind", "M", "N", "system", "seed", "snr_list", "count"}
    meta = {k: v for k, v in header.items() if k not in known}
    return Dataset(H, y, x, snr, system, header["seed"], tuple(header["snr_list"]), meta)


def save_dataset(ds: Dataset, path):
    atomic_write(path, dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())


# ----------------------------------------------------------------- checkpoint


def _state_arrays(state: TrainState) -> list:
    arrays = [("params.eta", state.params.eta), ("params.lam", state.params.lam), ("params.rho", state.params.rho)]
    if state.quant is not None:
        arrays += [("quant.delta", state.quant.delta), ("quant.alpha", state.quant.alpha),
                   ("quant.gamma", state.quant.gamma)]
    if state.kernel is not None:
        arrays.append(("kernel.log_sigma", state.kernel.log_sigma))
    for name in sorted(state.adam_m):
        arrays.append((f"adam_m.{name}", state.adam_m[name]))
        arrays.append((f"adam_v.{name}", state.adam_v[name]))
    return arrays


def checkpoint_to_bytes(state: TrainState, config: TrainConfig, dims=None, extra: dict | None = None) -> bytes:
    arrays = _state_arrays(state)
    header = {
        "version": FORMAT_VERSION,
        "kind": "checkpoint",
        "config": config.to_dict(),
        "variant": state.params.variant,
        "bits": None if state.quant is None else state.quant.bits,
        "dynamic": None if state.quant is None else bool(state.quant.dynamic),
        "step": int(state.step),
        "epoch": int(state.epoch),
        # Mini-batch order is a pure function of (seed, epoch), so this is the whole RNG cursor.
        "rng_cursor": {"seed": int(config.seed), "epoch": int(state.epoch)},
        "dims": None if dims is None else [int(d) for d in dims],
        "arrays": [{"name": n, "shape": list(np.shape(a))} for n, a in arrays],
        **(extra or {}),
    }
    payload = np.concatenate([np.ravel(a) for _, a in arrays]) if arrays else np.zeros(0)
    return _pack(CHECKPOINT_MAGIC, header, payload)


def checkpoint_from_bytes(blob: bytes):
    """Returns ``(state, config, header)``."""
    header, flat = _unpack(blob, CHECKPOINT_MAGIC)
    arrays, pos = {}, 0
    for item in header["arrays"]:
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        arrays[item["name"]] = flat[pos:pos + n].reshape(item["shape"]).copy()
        pos += n
    if pos != flat.size:
        raise FormatError("checkpoint payload size does not match its manifest")
    config = TrainConfig(**header["config"])
    params = UnfoldedParams(header["variant"], arrays["params.eta"], arrays["params.lam"], arrays["params.rho"])
    quant = None
    if "quant.delta" in arrays:
        quant = QuantConfig(header["bits"], arrays["quant.delta"], arrays["quant.alpha"], arrays["quant.gamma"],
                            header["dynamic"])
    kernel = KernelParams(arrays["kernel.log_sigma"]) if "kernel.log_sigma" in arrays else None
    adam_m = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m.")}
    adam_v = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v.")}
    state = TrainState(params, quant, kernel, adam_m, adam_v, header["step"], header["epoch"])
    return state, config, header


def save_checkpoint(path, state: TrainState, config: TrainConfig, dims=None, extra: dict | None = None):
    atomic_write(path, checkpoint_to_bytes(state, config, dims, extra))


def load_checkpoint(path):
    return checkpoint_from_bytes(Path(path).read_bytes())
