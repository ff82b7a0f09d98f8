import json
import struct

import numpy as np
import pytest

from kaq import io as kio
from kaq.training import TrainConfig, train


@pytest.fixture(scope="module")
def trained(small_dataset):
    cfg = TrainConfig(epochs=2, batch_size=32, seed=4)
    state, history = train(small_dataset, cfg)
    return state, cfg, history


def test_dataset_round_trip_is_byte_exact(small_dataset, tmp_path):
    path = tmp_path / "d.kaq"
    kio.save_dataset(small_dataset, path)
    blob = path.read_bytes()
    ds = kio.load_dataset(path)
    for name in ("H", "y", "x", "snr_db"):
        assert np.array_equal(getattr(ds, name), getattr(small_dataset, name))
    assert ds.system == small_dataset.system and ds.seed == small_dataset.seed
    assert kio.dataset_to_bytes(ds) == blob


def test_dataset_layout(small_dataset):
    blob = kio.dataset_to_bytes(small_dataset.subset([0, 1]))
    assert blob[:8] == kio.DATASET_MAGIC
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    assert header["version"] == 1 and header["count"] == 2 and header["M"] == 4
    rec = np.frombuffer(blob[16 + hlen:], dtype="<f8").reshape(2, -1)
    assert np.array_equal(rec[0, :16], small_dataset.H[0].ravel())
    assert rec[1, -1] == small_dataset.snr_db[1]


def test_checkpoint_round_trip_is_byte_exact(trained, tmp_path):
    state, cfg, history = trained
    path = tmp_path / "c.ckpt"
    kio.save_checkpoint(path, state, cfg, (4, 4), {"history": history})
    blob = path.read_bytes()
    loaded, cfg2, header = kio.load_checkpoint(path)
    assert cfg2 == cfg and header["history"] == history
    assert header["rng_cursor"] == {"seed": 4, "epoch": 2}
    assert np.array_equal(loaded.kernel.log_sigma, state.kernel.log_sigma)
    assert np.array_equal(loaded.quant.alpha, state.quant.alpha)
    assert loaded.step == state.step
    assert kio.checkpoint_to_bytes(loaded, cfg2, (4, 4), {"history": header["history"]}) == blob


def test_fp_checkpoint(small_dataset):
    cfg = TrainConfig(mode="fp", epochs=1, batch_size=32)
    state, _ = train(small_dataset, cfg)
    loaded, _, header = kio.checkpoint_from_bytes(kio.checkpoint_to_bytes(state, cfg))
    assert loaded.quant is None and loaded.kernel is None and header["bits"] is None
    assert np.array_equal(loaded.params.eta, state.params.eta)


def test_bad_files_rejected(small_dataset, trained):
    blob = kio.dataset_to_bytes(small_dataset.subset([0]))
    with pytest.raises(kio.FormatError):
        kio.checkpoint_from_bytes(blob)
    with pytest.raises(kio.FormatError):
        kio.dataset_from_bytes(blob[:-3])
    with pytest.raises(kio.FormatError):
        kio.dataset_from_bytes(blob[:-8])
    bumped = blob.replace(b'"version":1', b'"version":9')
    with pytest.raises(kio.FormatError):
        kio.dataset_from_bytes(bumped)


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    with pytest.raises(TypeError):
        kio.atomic_write(tmp_path / "x.bin", object())
    assert list(tmp_path.iterdir()) == []
