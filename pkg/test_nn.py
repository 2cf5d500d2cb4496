#!/usr/bin/env python3
"""Tests for the MLP: initialization, forward pass, backpropagation and local SGD."""

import math

import numpy as np
import pytest

from conftest import SMALL_DIMS, make_dataset
from src.fedbench.errors import ShapeMismatchError
from src.fedbench.nn import (
    Hyperparams,
    _forward_pass,
    flop_count,
    forward,
    init_model,
    loss_and_grads,
    mean_cross_entropy,
    predict,
    train_local,
    zeros_model,
)


def test_init_is_deterministic():
    a = init_model([784, 256, 128, 10], seed=7)
    b = init_model([784, 256, 128, 10], seed=7)
    c = init_model([784, 256, 128, 10], seed=8)
    assert a.equals(b)
    assert a.fingerprint() == b.fingerprint()
    assert not a.equals(c)


def test_init_shapes_and_param_count():
    model = init_model([784, 256, 128, 10], seed=0)
    assert model.layer_dims == (784, 256, 128, 10)
    assert model.param_count == 235146
    assert model.dtype == np.float32
    assert [w.shape for w in model.weights] == [(256, 784), (128, 256), (10, 128)]


def test_init_glorot_bounds_and_zero_biases():
    model = init_model([50, 30, 10], seed=3)
    for (fan_in, fan_out), w, b in zip([(50, 30), (30, 10)], model.weights, model.biases):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(w).max() <= limit
        assert not b.any()


@pytest.mark.parametrize("dims", [[784], [], [784, 0, 10]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        init_model(dims, seed=1)


def test_forward_rows_are_distributions():
    model = init_model(SMALL_DIMS, seed=1)
    x = np.random.default_rng(0).uniform(size=(37, SMALL_DIMS[0]))
    probs = forward(model, x)
    assert probs.shape == (37, 10)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(forward(model, x, chunk_size=8), probs, atol=1e-6)
    assert (predict(model, x) == probs.argmax(axis=1)).all()


def test_forward_zero_model_is_uniform():
    probs = forward(zeros_model(SMALL_DIMS), np.ones((3, SMALL_DIMS[0])))
    np.testing.assert_allclose(probs, 0.1, atol=1e-7)


def test_zero_model_loss_is_ln10():
    data = make_dataset(50, seed=0)
    loss = mean_cross_entropy(zeros_model(SMALL_DIMS), data.images, data.labels)
    assert loss == pytest.approx(math.log(10), abs=1e-6)


def test_forward_width_mismatch():
    model = init_model(SMALL_DIMS, seed=1)
    with pytest.raises(ValueError):
        forward(model, np.zeros((2, SMALL_DIMS[0] + 1)))


def test_loss_and_grads_rejects_empty_batch_and_bad_labels():
    model = init_model(SMALL_DIMS, seed=1)
    with pytest.raises(ValueError, match="empty"):
        loss_and_grads(model, np.zeros((0, SMALL_DIMS[0])), np.zeros(0))
    with pytest.raises(ValueError, match="out of range"):
        loss_and_grads(model, np.zeros((2, SMALL_DIMS[0])), [0, 10])


def test_check_congruent():
    with pytest.raises(ShapeMismatchError):
        init_model([4, 3, 2], seed=0).check_congruent(init_model([4, 5, 2], seed=0))


def _random_small_case(rng):
    """Model with at most 50 parameters plus a batch whose hidden units avoid the ReLU kink."""
    while True:
        n_in = int(rng.integers(1, 5))
        hidden = int(rng.integers(1, 5))
        n_out = int(rng.integers(2, 5))
        dims = [n_in, hidden, n_out]
        if n_in * hidden + hidden + hidden * n_out + n_out > 50:
            continue
        model = init_model(dims, seed=int(rng.integers(1 << 32))).astype(np.float64)
        for b in model.biases:
            b[:] = rng.normal(0.0, 0.1, size=b.shape)
        x = rng.normal(size=(int(rng.integers(1, 6)), n_in))
        y = rng.integers(0, n_out, size=len(x))
        _, pre = _forward_pass(model, x)
        if all(np.abs(z).min() >= 0.05 for z in pre[:-1]):
            return model, x, y


def test_backprop_matches_central_differences():
    rng = np.random.default_rng(2024)
    eps = 1e-3
    for _ in range(100):
        model, x, y = _random_small_case(rng)
        _, grads = loss_and_grads(model, x, y)
        for params, analytic in zip(model.weights + model.biases, grads.weights + grads.biases):
            flat = params.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                plus, _ = loss_and_grads(model, x, y)
                flat[i] = saved - eps
                minus, _ = loss_and_grads(model, x, y)
                flat[i] = saved
                numeric = (plus - minus) / (2 * eps)
                a = analytic.reshape(-1)[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
                assert rel <= 1e-4


def test_train_local_zero_learning_rate_keeps_model():
    model = init_model(SMALL_DIMS, seed=5)
    data = make_dataset(40, seed=3)
    trained, trace = train_local(model, data, Hyperparams(0.0, 8, 2), np.random.default_rng(0))
    assert trained.equals(model)
    assert len(trace) == 2


def test_train_local_zero_epochs_keeps_model():
    model = init_model(SMALL_DIMS, seed=5)
    trained, trace = train_local(model, make_dataset(40, seed=3), Hyperparams(0.1, 8, 0), np.random.default_rng(0))
    assert trained.equals(model)
    assert trace == []


def test_train_local_is_deterministic_and_pure():
    model = init_model(SMALL_DIMS, seed=5)
    before = model.copy()
    data = make_dataset(80, seed=3)
    hyper = Hyperparams(0.1, 16, 2)
    a, _ = train_local(model, data, hyper, np.random.default_rng(42))
    b, _ = train_local(model, data, hyper, np.random.default_rng(42))
    c, _ = train_local(model, data, hyper, np.random.default_rng(43))
    assert a.equals(b)
    assert not a.equals(c)
    assert model.equals(before)


def test_train_local_reduces_loss():
    model = init_model(SMALL_DIMS, seed=5)
    data = make_dataset(200, seed=3)
    start = mean_cross_entropy(model, data.images, data.labels)
    trained, trace = train_local(model, data, Hyperparams(0.2, 16, 5), np.random.default_rng(1))
    assert mean_cross_entropy(trained, data.images, data.labels) < start
    assert trace[-1] < trace[0]


def test_train_local_rejects_empty_part():
    empty = make_dataset(10, seed=0).subset([])
    with pytest.raises(ValueError):
        train_local(init_model(SMALL_DIMS, seed=0), empty, Hyperparams(), np.random.default_rng(0))


def test_flop_count_formula():
    model = init_model([784, 256, 128, 10], seed=0)
    assert flop_count(model, 20000, 3) == 6 * 235146 * 20000 * 3
    assert flop_count(model, 0, 3) == 0


def test_hyperparams_validate():
    assert Hyperparams().validate() == []
    problems = Hyperparams(learning_rate=-1, batch_size=0, epochs_per_round=-1).validate()
    assert len(problems) == 3
