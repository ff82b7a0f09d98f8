import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from kaq.estimator import UnfoldedDetector


def test_params_round_trip():
    est = UnfoldedDetector(mode="qat-mse", n_layers=3, epochs=2)
    params = est.get_params()
    assert params["mode"] == "qat-mse" and params["n_layers"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(bits=6)
    assert est.bits == 6


def test_predict_before_fit(small_dataset):
    with pytest.raises(NotFittedError):
        UnfoldedDetector().predict(small_dataset.H[:2], small_dataset.y[:2], 10.0)


def test_fit_predict_score(small_dataset):
    est = UnfoldedDetector(epochs=2, batch_size=32, random_state=3).fit(small_dataset)
    assert len(est.history_) == 2 and est.n_features_in_ == 4
    one = est.predict(small_dataset.H[0], small_dataset.y[0], 10.0)
    assert one.shape == (4,)
    batch = est.predict(small_dataset.H[:5], small_dataset.y[:5], small_dataset.snr_db[:5])
    assert batch.shape == (5, 4)
    sym = est.predict_symbols(small_dataset.H[:5], small_dataset.y[:5], small_dataset.snr_db[:5])
    assert set(np.unique(sym)) <= {-1.0, 1.0}
    assert 0.5 < est.score(small_dataset) <= 1.0


def test_input_validation(small_dataset):
    est = UnfoldedDetector(epochs=1, batch_size=32).fit(small_dataset)
    with pytest.raises(ValueError, match="snr_db"):
        est.predict(small_dataset.H[:2], small_dataset.y[:2])
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 4, 6)), np.zeros((2, 4)), 10.0)
    with pytest.raises(ValueError):
        est.predict(small_dataset.H[:2], small_dataset.y[:3], 10.0)
    with pytest.raises(ValueError):
        est.predict(small_dataset.H[:2], np.full((2, 4), np.nan), 10.0)
    with pytest.raises(TypeError):
        UnfoldedDetector().fit(small_dataset.H)


def test_fp_detector_needs_no_snr(small_dataset):
    est = UnfoldedDetector(mode="fp", epochs=1, batch_size=32).fit(small_dataset)
    assert est.predict(small_dataset.H[:3], small_dataset.y[:3]).shape == (3, 4)


def test_save_load(small_dataset, tmp_path):
    est = UnfoldedDetector(epochs=1, batch_size=32).fit(small_dataset)
    path = tmp_path / "est.ckpt"
    est.save(path)
    back = UnfoldedDetector.load(path)
    assert back.get_params() == est.get_params()
    H, y, s = small_dataset.H[:20], small_dataset.y[:20], small_dataset.snr_db[:20]
    assert np.array_equal(back.predict(H, y, s), est.predict(H, y, s))
    assert back.history_ == est.history_
