from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delta_lab import linearize as lz
from delta_lab import network as nw
from delta_lab.errors import ConfigError, DataError, DimensionError

from conftest import random_net


def test_linear_forward_at_zero_scale_is_base():
    spec, theta, rng = random_net(1)
    tau = rng.standard_normal(spec.param_count)
    x = rng.standard_normal((3, spec.input_dim))
    m = lz.LinearizedModel(spec, theta, tau)
    assert np.array_equal(lz.linear_forward(m, x, 0.0), nw.forward(spec, theta, x))


def test_linear_forward_is_affine_in_scale():
    spec, theta, rng = random_net(2)
    m = lz.LinearizedModel(spec, theta, rng.standard_normal(spec.param_count))
    x = rng.standard_normal(spec.input_dim)
    f0, f1, f3 = (lz.linear_forward(m, x, s) for s in (0.0, 1.0, 3.0))
    assert np.allclose(f3 - f0, 3 * (f1 - f0), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_identity_net_single_layer_edit_is_exact(seed):
    spec = nw.NetworkSpec((3, 2), "identity")
    theta = nw.init_params(spec, seed)
    rng = np.random.default_rng(seed)
    tau = rng.standard_normal(spec.param_count)
    x = rng.standard_normal((4, 3))
    m = lz.LinearizedModel(spec, theta, tau)
    assert np.abs(lz.linear_forward(m, x, 1.0) - nw.forward(spec, theta + tau, x)).max() <= 1e-12


def test_linearization_error_known_value():
    # one tanh unit, scalar weight w, f(x) = v * tanh(w x); ensemble {w=0, w=2} at x=1, v=1
    spec = nw.NetworkSpec((1, 1, 1), "tanh")
    t1 = np.array([0.0, 0.0, 1.0, 0.0])
    t2 = np.array([2.0, 0.0, 1.0, 0.0])
    err = lz.linearization_error(spec, [t1, t2], np.array([1.0]))
    assert err == pytest.approx(abs(np.tanh(2.0) / 2 - np.tanh(1.0)))


def test_linearization_error_identity_nets_single_layer():
    spec = nw.NetworkSpec((4, 3), "identity")
    rng = np.random.default_rng(0)
    thetas = [rng.standard_normal(spec.param_count) for _ in range(5)]
    err = lz.linearization_error(spec, thetas, rng.standard_normal((10, 4)))
    assert np.abs(err).max() <= 1e-12


def test_linearization_error_needs_two_models():
    spec = nw.NetworkSpec((2, 2))
    with pytest.raises(ConfigError):
        lz.linearization_error(spec, [np.zeros(spec.param_count)], np.zeros(2))


def test_summarize_histogram_and_errors():
    prof = lz.summarize(np.array([0.0, 1.0, 1.0, 2.0]), bins=4)
    assert prof.counts.sum() == 4 and prof.mean == 1.0
    assert prof.quantiles["q50"] == 1.0
    with pytest.raises(DataError):
        lz.summarize(np.array([]))
    d = prof.to_dict()
    assert d["n"] == 4 and len(d["bin_edges"]) == 5


def test_model_validation():
    spec = nw.NetworkSpec((2, 2))
    with pytest.raises(DimensionError):
        lz.LinearizedModel(spec, np.zeros(spec.param_count), np.zeros(1))
    m = lz.LinearizedModel(spec, np.zeros(spec.param_count), np.zeros(spec.param_count))
    with pytest.raises(ConfigError):
        lz.linear_forward(m, np.zeros(2), np.inf)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_linearization_error_is_nonnegative_and_zero_for_equal_weights(seed):
    spec, theta, rng = random_net(seed % 40)
    x = rng.standard_normal((3, spec.input_dim))
    other = theta + rng.standard_normal(spec.param_count)
    assert np.all(lz.linearization_error(spec, [theta, other], x) >= 0)
    assert np.all(lz.linearization_error(spec, [theta, theta, theta], x) <= 1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_linearization_error_is_permutation_invariant(seed):
    spec, theta, rng = random_net(seed % 40)
    x = rng.standard_normal((3, spec.input_dim))
    ts = [theta + rng.standard_normal(spec.param_count) for _ in range(3)]
    a = lz.linearization_error(spec, ts, x)
    b = lz.linearization_error(spec, ts[::-1], x)
    assert np.allclose(a, b, atol=1e-12)
