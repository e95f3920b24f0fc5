"""Architecture, forward/backward plumbing, and the weight file format."""

import numpy as np
import pytest

from ppg2resp import model as model_mod
from ppg2resp import nncore
from ppg2resp.errors import (
    BadMagicError,
    BuildError,
    ShapeError,
    TruncatedFileError,
    WeightFileError,
)
from ppg2resp.model import ModelConfig

import oracles

SMALL = ModelConfig(
    window_len=32,
    hidden_channels=4,
    encoder_kernels=(9, 5, 3),
    encoder_paddings=(2, 1, 0),
)


def test_shape_plan_matches_stated_architecture():
    plan = model_mod.shape_plan_for(ModelConfig())
    assert plan == [288, 179, 125, 76, 125, 179, 288]


def test_parameter_count():
    model = model_mod.build_model()
    by_formula = 0
    for cin, cout, k in [
        (1, 8, 150), (8, 8, 75), (8, 8, 50),
        (8, 8, 50), (8, 8, 75), (8, 1, 150),
    ]:
        by_formula += cout * cin * k + cout
    assert by_formula == 18441
    assert model.n_parameters == 18441


def test_build_is_deterministic_per_seed():
    a = model_mod.build_model(rng_seed=3)
    b = model_mod.build_model(rng_seed=3)
    c = model_mod.build_model(rng_seed=4)
    for (_, ta), (_, tb) in zip(a.parameter_tensors(), b.parameter_tensors()):
        assert np.array_equal(ta, tb)
    assert not np.array_equal(a.layers[0].params.weights, c.layers[0].params.weights)


def test_forward_output_shape_and_range():
    model = model_mod.build_model(rng_seed=0)
    x = np.random.default_rng(0).standard_normal(288)
    y, latent = model_mod.forward(model, x)
    assert y.shape == (1, 288)
    assert latent.shape == (8, 76)
    # final and latent activations are sigmoids
    assert np.all((y > 0) & (y < 1))
    assert np.all((latent > 0) & (latent < 1))


def test_dropout_active_only_in_training_and_reproducible():
    model = model_mod.build_model(rng_seed=1)
    x = np.random.default_rng(1).standard_normal(288)
    e1, _ = model_mod.forward(model, x)
    e2, _ = model_mod.forward(model, x)
    t1, _ = model_mod.forward(model, x, training=True, rng_seed=7)
    t2, _ = model_mod.forward(model, x, training=True, rng_seed=7)
    t3, _ = model_mod.forward(model, x, training=True, rng_seed=8)
    assert np.array_equal(e1, e2)
    assert np.array_equal(t1, t2)
    assert not np.array_equal(t1, t3)
    assert not np.array_equal(e1, t1)


def test_encoder_activation_shapes():
    model = model_mod.build_model(rng_seed=0)
    acts = model_mod.encoder_activations(
        model, np.random.default_rng(2).standard_normal(288)
    )
    assert [a.shape for a in acts] == [(8, 179), (8, 125), (8, 76)]


def test_end_to_end_gradients_match_finite_differences():
    model = model_mod.build_model(SMALL, rng_seed=5)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 1, 32))
    y = rng.random((2, 1, 32))

    out, _, cache = model_mod.forward_batch(model, x, keep_cache=True)
    _, grad = nncore.mse_loss(out, y)
    grads = model_mod.backward_batch(model, cache, grad)
    flat = [g for gw, gb in grads for g in (gw, gb)]

    def loss_now(_arr=None):
        out_now, _, _ = model_mod.forward_batch(model, x)
        return nncore.mse_loss(out_now, y)[0]

    for (label, tensor), got in zip(model.parameter_tensors(), flat):
        fd = oracles.fd_gradient(lambda _t: loss_now(), tensor, h=1e-5)
        assert oracles.rel_error(got, fd) < 1e-5, label


def test_backward_batches_sum_like_single_samples():
    model = model_mod.build_model(SMALL, rng_seed=9)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 1, 32))
    y = rng.random((3, 1, 32))
    out, _, cache = model_mod.forward_batch(model, x, keep_cache=True)
    _, grad = nncore.mse_loss(out, y)
    batched = model_mod.backward_batch(model, cache, grad)

    # same loss split into per-sample thirds accumulates to the same grads
    acc = None
    for i in range(3):
        oi, _, ci = model_mod.forward_batch(model, x[i : i + 1], keep_cache=True)
        _, gi = nncore.mse_loss(oi, y[i : i + 1])
        gr = model_mod.backward_batch(model, ci, gi / 3.0)
        if acc is None:
            acc = [[gw.copy(), gb.copy()] for gw, gb in gr]
        else:
            for a, (gw, gb) in zip(acc, gr):
                a[0] += gw
                a[1] += gb
    for (bw, bb), (aw, ab) in zip(batched, acc):
        assert np.max(np.abs(bw - aw)) < 1e-12
        assert np.max(np.abs(bb - ab)) < 1e-12


def test_weight_round_trip_and_file_size(tmp_path):
    model = model_mod.build_model(rng_seed=11)
    path = tmp_path / "m.rspw"
    model_mod.save_weights(model, path)
    # magic 8, counts 8, 6 x 20-byte layer headers, f32 params, adam flag
    assert path.stat().st_size == 8 + 8 + 6 * 20 + 4 * 18441 + 1

    loaded = model_mod.load_weights(path)
    assert loaded.config == model.config
    assert loaded.shape_plan == model.shape_plan
    for (_, a), (_, b) in zip(model.parameter_tensors(), loaded.parameter_tensors()):
        assert np.max(np.abs(a - b)) <= 1e-6

    # deterministic bytes, and save(load(x)) is a fixed point
    path2 = tmp_path / "m2.rspw"
    model_mod.save_weights(model, path2)
    assert path.read_bytes() == path2.read_bytes()
    path3 = tmp_path / "m3.rspw"
    model_mod.save_weights(loaded, path3)
    assert path.read_bytes() == path3.read_bytes()


def test_small_window_config_survives_round_trip(tmp_path):
    model = model_mod.build_model(SMALL, rng_seed=12)
    path = tmp_path / "small.rspw"
    model_mod.save_weights(model, path)
    loaded = model_mod.load_weights(path)
    assert loaded.config.window_len == 32
    assert loaded.config.encoder_kernels == (9, 5, 3)
    out_a, _ = model_mod.forward(model, np.linspace(-1, 1, 32))
    out_b, _ = model_mod.forward(loaded, np.linspace(-1, 1, 32))
    assert np.max(np.abs(out_a - out_b)) < 1e-6


def test_adam_state_round_trips_exactly(tmp_path):
    model = model_mod.build_model(SMALL, rng_seed=13)
    rng = np.random.default_rng(14)
    model.adam = []
    for _, tensor in model.parameter_tensors():
        state = nncore.adam_init(tensor)
        state.first_moment = rng.standard_normal(tensor.shape)
        state.second_moment = rng.random(tensor.shape)
        state.step_count = 3
        model.adam.append(state)
    path = tmp_path / "adam.rspw"
    model_mod.save_weights(model, path, include_adam=True)
    loaded = model_mod.load_weights(path)
    assert loaded.adam is not None and len(loaded.adam) == len(model.adam)
    for a, b in zip(model.adam, loaded.adam):
        assert b.step_count == 3
        assert np.array_equal(a.first_moment, b.first_moment)
        assert np.array_equal(a.second_moment, b.second_moment)
    # without the flag the optimizer state is dropped
    model_mod.save_weights(model, path)
    assert model_mod.load_weights(path).adam is None


def test_weight_file_error_cases(tmp_path):
    model = model_mod.build_model(SMALL, rng_seed=15)
    path = tmp_path / "w.rspw"
    model_mod.save_weights(model, path)
    raw = bytearray(path.read_bytes())

    bad = tmp_path / "bad.rspw"
    bad.write_bytes(b"NOTMAGIC" + bytes(raw[8:]))
    with pytest.raises(BadMagicError):
        model_mod.load_weights(bad)

    short = tmp_path / "short.rspw"
    short.write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(TruncatedFileError):
        model_mod.load_weights(short)

    trailing = tmp_path / "trailing.rspw"
    trailing.write_bytes(bytes(raw) + b"\x00\x00")
    with pytest.raises(WeightFileError):
        model_mod.load_weights(trailing)

    # activation code byte of layer 0 sits after magic+counts+16 dims
    act = bytearray(raw)
    act[8 + 8 + 16 + 1] = 9
    badact = tmp_path / "badact.rspw"
    badact.write_bytes(bytes(act))
    with pytest.raises(WeightFileError):
        model_mod.load_weights(badact)


def test_check_same_shapes():
    a = model_mod.build_model(rng_seed=0)
    b = model_mod.build_model(rng_seed=99)
    model_mod.check_same_shapes(a, b)
    small = model_mod.build_model(SMALL, rng_seed=0)
    with pytest.raises(ShapeError):
        model_mod.check_same_shapes(a, small)


def test_shape_plan_errors_name_the_stage():
    with pytest.raises(BuildError, match="encoder stage 1"):
        model_mod.shape_plan_for(
            ModelConfig(
                window_len=8,
                encoder_kernels=(9, 5, 3),
                encoder_paddings=(0, 0, 0),
            )
        )
    with pytest.raises(BuildError):
        model_mod.build_model(
            ModelConfig(encoder_kernels=(150, 75), encoder_paddings=(20, 10, 0))
        )


def test_forward_rejects_bad_windows():
    model = model_mod.build_model(rng_seed=0)
    with pytest.raises(ShapeError):
        model_mod.forward(model, np.zeros(287))
    bad = np.zeros(288)
    bad[5] = np.nan
    with pytest.raises(ShapeError):
        model_mod.forward(model, bad)
