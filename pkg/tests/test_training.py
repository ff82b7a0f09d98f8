import numpy as np
import pytest

import kaq.training as tr
from kaq.kernel import KernelParams, median_bandwidth
from kaq.nets import UnfoldedParams, forward
from kaq.quantizer import QuantConfig, initial_step_size
from kaq.sim import DEFAULT_SNR_DB, QAM16_LEVELS, ComplexSystem, Dataset, build_dataset
from kaq.training import (TrainConfig, TrainState, adam_step, backward, calibration_subset, epoch_batches,
                          init_state, total_loss, train)
from oracles import GRAD_COMBOS, gradient_rel_errors, kernel_loop, mmd2_loop, random_problem


# ------------------------------------------------------------------ total loss


def test_perfect_detector_has_zero_loss(rng):
    B, N = 4, 4
    x = rng.choice([-1.0, 1.0], size=(B, N))
    batch = Dataset(np.broadcast_to(np.eye(N), (B, N, N)).copy(), x.copy(), x, np.full(B, 10.0),
                    ComplexSystem(2, 2, (-1.0, 1.0)))
    # one exact gradient step from zero lands on y = x, which lies on the lattice
    state = TrainState(UnfoldedParams("pgd", [1.0], [0.0]), QuantConfig(8, [1.0]), KernelParams.from_sigmas([1.0]))
    loss, parts, _ = total_loss(batch, state, TrainConfig(mode="kaq", dynamic=False, layers=1))
    assert loss == 0.0 and parts == {"mse": 0.0, "mmd": 0.0}


def test_zero_weight_is_plain_mse(rng):
    batch, state, config = random_problem(rng, 2, 4, 3)
    config.epsilon = 0.0
    loss, parts, trace = total_loss(batch, state, config)
    assert parts["mmd"] != 0
    assert loss == parts["mse"] == pytest.approx(np.mean(np.sum((batch.x - trace.output) ** 2, axis=1)))


def test_loss_matches_loop_recomputation(rng):
    batch, state, config = random_problem(rng, 2, 4, 3)
    loss, _, trace = total_loss(batch, state, config)
    B = len(batch)
    mse = 0.0
    for b in range(B):
        for n in range(batch.N):
            mse += (batch.x[b, n] - trace.x_q[-1][b, n]) ** 2
    mse /= B
    mmd = sum(mmd2_loop(trace.x[k + 1], trace.x_q[k], *state.kernel.layer(k)) for k in range(2))
    assert loss == pytest.approx(mse + config.epsilon * mmd, rel=1e-12)
    assert kernel_loop([0.0], [0.0], 1.0) == 1.0


def test_kaq_needs_two_samples(rng):
    batch, state, config = random_problem(rng, 1, 2, 2)
    with pytest.raises(ValueError):
        total_loss(batch.subset([0]), state, config)


def test_backward_needs_trace(rng):
    batch, state, config = random_problem(rng, 1, 2, 2)
    with pytest.raises(ValueError):
        backward(batch, state, config, None)


# -------------------------------------------------------------------- backward


@pytest.mark.parametrize("variant,mode,dynamic", GRAD_COMBOS)
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(variant, mode, dynamic, seed):
    rng = np.random.default_rng(seed)
    batch, state, config = random_problem(rng, 2, 4, 3, variant, mode, dynamic)
    errs = gradient_rel_errors(batch, state, config)
    assert errs and max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("total", [True, False])
def test_single_slot_switch_is_consistent(rng, total):
    batch, state, config = random_problem(rng, 2, 4, 3)
    config.mmd_grad = "total" if total else "single"
    _, _, trace = total_loss(batch, state, config)
    g = backward(batch, state, config, trace)
    assert set(g) == {"eta", "lam", "alpha", "gamma", "sigma"}
    # bandwidth gradients do not depend on the slot convention
    config.mmd_grad = "total"
    assert np.array_equal(g["sigma"], backward(batch, state, config, trace)["sigma"])


def test_dead_zone_blocks_step_gradients(rng):
    batch, state, config = random_problem(rng, 2, 4, 3, "pgd", "fp")
    state.params.lam[:] = 1e6
    _, _, trace = total_loss(batch, state, config)
    g = backward(batch, state, config, trace)
    assert not np.any(g["eta"])


def test_fine_quantizer_matches_full_precision_gradients(rng):
    batch, state, config = random_problem(rng, 2, 4, 3, "pgd", "fp")
    _, _, trace = total_loss(batch, state, config)
    g_fp = backward(batch, state, config, trace)
    qstate = state.copy()
    # 16 bits at step 1e-4 cover +-3.28, well beyond every activation here
    qstate.quant = QuantConfig(16, np.full(2, 1e-4))
    qconfig = TrainConfig(mode="qat-mse", layers=2, bits=16, batch_size=3)
    _, _, qtrace = total_loss(batch, qstate, qconfig)
    assert all(np.all(m == 1) for m in qtrace.masks)
    g_q = backward(batch, qstate, qconfig, qtrace)
    for name in ("eta", "lam"):
        assert np.max(np.abs(g_q[name] - g_fp[name])) <= 1e-3 * np.max(np.abs(g_fp[name]))


def test_ste_conservation_when_nothing_saturates(rng):
    batch, state, config = random_problem(rng, 2, 4, 3, bits=8)
    _, _, trace = total_loss(batch, state, config)
    assert all(np.all(m == 1) for m in trace.masks)
    g = backward(batch, state, config, trace)
    # identity in the backward pass: replace every mask by ones
    trace.masks = [np.ones_like(m) for m in trace.masks]
    g_id = backward(batch, state, config, trace)
    for name in g:
        assert np.array_equal(g[name], g_id[name])


# ------------------------------------------------------------------------ adam


def test_adam_zero_gradient_is_null_update(rng):
    batch, state, config = random_problem(rng, 2, 4, 3)
    state.adam_m = {"eta": np.ones(2)}
    state.adam_v = {"eta": np.ones(2)}
    new = adam_step(state, {"eta": np.zeros(2)}, 1e-3, config)
    assert np.array_equal(new.adam_m["eta"], 0.9 * np.ones(2))
    assert np.array_equal(new.adam_v["eta"], 0.999 * np.ones(2))
    fresh = adam_step(TrainState(state.params.copy()), {"eta": np.zeros(2), "lam": np.zeros(2)}, 1e-3)
    assert np.array_equal(fresh.params.eta, state.params.eta)
    assert np.array_equal(fresh.params.lam, state.params.lam)
    assert fresh.step == 1


def test_adam_first_step_moves_by_lr(rng):
    batch, state, config = random_problem(rng, 2, 4, 3)
    lr = 1e-3
    grads = {"eta": np.array([0.3, -2.0]), "lam": np.array([-1e-3, 5.0]),
             "alpha": np.array([1.0, -1.0]), "gamma": np.array([4.0, -0.1]), "sigma": np.ones((3, 2))}
    new = adam_step(state, grads, lr, config)
    assert np.allclose(new.params.eta - state.params.eta, -lr * np.sign(grads["eta"]), rtol=1e-4)
    assert np.allclose(new.params.lam - state.params.lam, -lr * np.sign(grads["lam"]), rtol=1e-4)
    # log-space learnables move by lr in log space
    assert np.allclose(np.log(new.quant.alpha / state.quant.alpha), -lr * np.sign(grads["alpha"]), rtol=1e-4)
    assert np.allclose(np.log(new.kernel.sigma / state.kernel.sigma), -lr, rtol=1e-4)
    again = adam_step(state, grads, lr, config)
    assert np.array_equal(again.params.eta, new.params.eta)
    assert np.array_equal(again.quant.gamma, new.quant.gamma)


def test_adam_projection_keeps_constraints():
    state = TrainState(UnfoldedParams("pgd", [1e-6], [1e-4]))
    new = adam_step(state, {"eta": np.array([1.0]), "lam": np.array([1.0])}, 1.0)
    assert new.params.eta[0] == tr.ETA_FLOOR and new.params.lam[0] == 0.0


def test_adam_shape_mismatch():
    state = TrainState(UnfoldedParams("pgd", [0.1, 0.1], [0.05, 0.05]))
    with pytest.raises(ValueError):
        adam_step(state, {"eta": np.zeros(3)}, 1e-3)


# ------------------------------------------------------------------- training


@pytest.fixture(scope="module")
def dataset4():
    return build_dataset(ComplexSystem(4, 4, QAM16_LEVELS), 2000, DEFAULT_SNR_DB, seed=1)


def test_config_defaults_and_schedule():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.lr, c.lr_halving_period, c.layers) == (50, 128, 1e-3, 10, 5)
    assert (c.eta_init, c.lambda_init, c.bits, c.epsilon) == (0.1, 0.05, 8, 0.1)
    assert (c.beta1, c.beta2, c.adam_eps) == (0.9, 0.999, 1e-8)
    for e in range(50):
        assert c.lr_at(e) == 1e-3 * 2.0 ** -(e // 10)


@pytest.mark.parametrize("kwargs", [dict(batch_size=1), dict(lr=0.0), dict(epochs=-1), dict(mode="int8"),
                                    dict(mode="fp", dynamic=True), dict(alpha_init=1.5),
                                    dict(sigma_init="mean"), dict(bandwidths="some")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_mode_aliases():
    assert TrainConfig(mode="off").mode == "fp"
    assert TrainConfig(mode="static-qat-mse").mode == "qat-mse"
    assert TrainConfig(mode="qat-mse").dynamic is False
    assert TrainConfig(mode="kaq").dynamic is True


def test_zero_epochs_returns_initial_state(small_dataset):
    cfg = TrainConfig(epochs=0)
    state, history = train(small_dataset, cfg)
    assert history == [] and state.step == 0 and state.epoch == 0
    init = init_state(small_dataset, cfg)
    assert np.array_equal(state.quant.alpha, init.quant.alpha)


def test_initial_values(small_dataset):
    state = init_state(small_dataset, TrainConfig(epochs=1))
    assert np.array_equal(state.params.eta, np.full(5, 0.1))
    assert np.array_equal(state.params.lam, np.full(5, 0.05))


def test_calibration(small_dataset):
    cfg = TrainConfig(calibration_size=100, alpha_init=0.25)
    calib = calibration_subset(small_dataset, 100)
    assert len(calib) == 100 and np.all(calib.snr_db == 10.0)
    assert np.array_equal(calib.H, small_dataset.H[np.flatnonzero(small_dataset.snr_db == 10.0)[:100]])
    state = init_state(small_dataset, cfg)
    tr_ = forward(state.params, calib.H, calib.y)
    delta = np.array([initial_step_size(tr_.x[k + 1], 8) for k in range(5)])
    assert np.allclose(state.quant.delta, delta, rtol=1e-15)
    # the dynamic model reproduces the calibrated step at the middle SNR
    assert np.allclose(state.quant.steps(10.0), delta, rtol=1e-12)
    assert np.allclose(state.quant.alpha / np.sqrt(10.0), 0.25 * delta)
    sig = [median_bandwidth(tr_.x[k + 1]) for k in range(5)]
    assert np.allclose(state.kernel.sigma, np.stack([sig] * 3), rtol=1e-12)


def test_fixed_sigma_and_gamma_init(small_dataset):
    state = init_state(small_dataset, TrainConfig(sigma_init="fixed:0.7"))
    assert np.allclose(state.kernel.sigma, 0.7)
    with pytest.raises(ValueError):
        init_state(small_dataset, TrainConfig(gamma_init=1e6))


def test_epoch_batches(small_dataset):
    cfg = TrainConfig(batch_size=64, seed=5)
    batches = epoch_batches(small_dataset, cfg, 0)
    for idx in batches:
        assert np.unique(small_dataset.snr_db[idx]).size == 1
        assert 2 <= idx.size <= 64
    assert sorted(np.concatenate(batches).tolist()) == list(range(len(small_dataset)))
    again = epoch_batches(small_dataset, cfg, 0)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = epoch_batches(small_dataset, cfg, 1)
    assert not all(np.array_equal(a, b) for a, b in zip(batches, other))


def test_training_reduces_loss(dataset4):
    cfg = TrainConfig(epochs=20, seed=1)
    _, history = train(dataset4, cfg)
    assert len(history) == 20
    assert history[-1]["loss"] < history[0]["loss"]
    assert [row["lr"] for row in history] == [cfg.lr_at(e) for e in range(20)]


def test_training_is_deterministic(small_dataset):
    cfg = TrainConfig(epochs=3, batch_size=32, seed=9)
    s1, h1 = train(small_dataset, cfg)
    s2, h2 = train(small_dataset, cfg)
    assert h1 == h2
    assert all(type(v) in (int, float) for row in h1 for v in row.values())
    assert np.array_equal(s1.params.eta, s2.params.eta)
    assert np.array_equal(s1.quant.alpha, s2.quant.alpha)
    assert np.array_equal(s1.kernel.log_sigma, s2.kernel.log_sigma)
    assert all(np.array_equal(s1.adam_v[k], s2.adam_v[k]) for k in s1.adam_v)


def test_resume_matches_uninterrupted(small_dataset):
    cfg = TrainConfig(epochs=4, batch_size=32, seed=2)
    _, full = train(small_dataset, cfg)
    half, h1 = train(small_dataset, TrainConfig(**{**cfg.to_dict(), "epochs": 2}))
    _, h2 = train(small_dataset, cfg, half)
    assert h1 + h2 == full


def test_fp_mode_never_touches_kernel_code(small_dataset, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("kernel code evaluated")

    for name in ("mmd2", "mmd2_grads", "median_bandwidth", "gauss_kernel"):
        monkeypatch.setattr(tr.kern, name, boom)
    state, history = train(small_dataset, TrainConfig(mode="off", epochs=2, batch_size=32))
    assert state.quant is None and state.kernel is None
    assert all(row["mmd"] == 0 for row in history)


def test_static_qat_never_updates_dynamic_or_kernel_params(small_dataset):
    cfg = TrainConfig(mode="static-qat-mse", epochs=2, batch_size=32)
    init = init_state(small_dataset, cfg)
    state, history = train(small_dataset, cfg)
    assert state.kernel is None and not state.quant.dynamic
    assert np.array_equal(state.quant.alpha, init.quant.alpha)
    assert np.array_equal(state.quant.gamma, init.quant.gamma)
    assert set(state.adam_m) == {"eta", "lam", "delta"}
    assert not np.array_equal(state.quant.delta, init.quant.delta)
    assert all(row["mmd"] == 0 for row in history)


def test_kaq_updates_dynamic_coefficients(small_dataset):
    cfg = TrainConfig(epochs=1, batch_size=32)
    init = init_state(small_dataset, cfg)
    state, _ = train(small_dataset, cfg)
    assert set(state.adam_m) == {"eta", "lam", "alpha", "gamma", "sigma"}
    assert not np.array_equal(state.quant.alpha, init.quant.alpha)
    assert np.all(state.quant.alpha > 0) and np.all(state.quant.gamma > 0)
    # tied bandwidths stay tied
    assert np.array_equal(state.kernel.log_sigma[0], state.kernel.log_sigma[1])
    assert np.array_equal(state.kernel.log_sigma[0], state.kernel.log_sigma[2])


def test_admm_trains(small_dataset):
    state, history = train(small_dataset, TrainConfig(variant="admm", epochs=2, batch_size=32))
    assert np.all(state.params.rho > 0) and len(history) == 2
    assert np.isfinite(history[-1]["loss"])
