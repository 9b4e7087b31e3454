from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delta_lab import metrics as mt
from delta_lab import network as nw
from delta_lab.errors import ConfigError, DataError

from conftest import random_net


def _linear_problem():
    # identity features, head = identity: predictions are argmax of the input
    spec = nw.NetworkSpec((3, 3), "identity")
    W = np.eye(3)
    theta = nw.flatten(spec, [(W, np.zeros(3))])
    head = nw.Head(np.eye(3), np.zeros(3))
    return spec, theta, head


def test_accuracy_known_value():
    spec, theta, head = _linear_problem()
    X = np.array([[1.0, 0, 0], [0, 2.0, 0], [0, 0, 3.0], [5.0, 0, 0]])
    assert mt.accuracy(spec, theta, head, (X, np.array([0, 1, 2, 1]))) == 0.75


def test_argmax_ties_go_to_lowest_class():
    spec, theta, head = _linear_problem()
    assert mt.predict(spec, theta, head, np.array([[1.0, 1.0, 0.0]]))[0] == 0


def test_linearized_accuracy_needs_base():
    spec, theta, head = _linear_problem()
    with pytest.raises(ConfigError):
        mt.accuracy(spec, theta, head, (np.eye(3), np.arange(3)), linearized=True)
    # identity single layer: linearized and plain evaluation agree
    a = mt.accuracy(spec, theta + 0.1, head, (np.eye(3), np.arange(3)), theta, True)
    assert a == mt.accuracy(spec, theta + 0.1, head, (np.eye(3), np.arange(3)))


def test_disentanglement_zero_for_zero_vectors():
    spec, theta, head = _linear_problem()
    z = np.zeros_like(theta)
    task = (np.eye(3), np.arange(3))
    assert mt.disentanglement_error(spec, theta, head, z, z, 1.0, 1.0, task, task) == 0.0
    hm = mt.disentanglement_heatmap(spec, theta, head, z, z, task, task)
    assert hm.values.shape == (7, 7) and hm.mean == 0.0


def test_disentanglement_known_value():
    spec, theta, head = _linear_problem()
    # tau2 shifts class-2 evidence by +10 everywhere; on task 1 inputs (e_0) the merged
    # model flips to class 2 while tau1 alone does nothing
    t1 = np.zeros_like(theta)
    t2 = nw.flatten(spec, [(np.zeros((3, 3)), np.array([0.0, 0.0, 10.0]))])
    X1 = np.array([[1.0, 0, 0]])
    X2 = np.array([[0, 0, 1.0]])
    err = mt.disentanglement_error(spec, theta, head, t1, t2, 1.0, 1.0, (X1, [0]), (X2, [2]))
    assert err == 1.0


def test_heatmap_matches_pointwise_and_csv(tmp_path):
    spec, theta, rng = random_net(4, dims=(3, 4, 3))
    head = nw.Head.random(3, 3, 0)
    t1, t2 = rng.standard_normal((2, spec.param_count))
    task1 = (rng.standard_normal((10, 3)), np.zeros(10, int))
    task2 = (rng.standard_normal((10, 3)), np.zeros(10, int))
    grid = [0.0, 0.5, 1.0]
    hm = mt.disentanglement_heatmap(spec, theta, head, t1, t2, task1, task2, grid, grid)
    for i, a in enumerate(grid):
        for j, b in enumerate(grid):
            assert hm.values[i, j] == mt.disentanglement_error(spec, theta, head, t1, t2, a, b, task1, task2)
    hm.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "alpha1\\alpha2,0,0.5,1"
    with pytest.raises(ConfigError):
        mt.disentanglement_heatmap(spec, theta, head, t1, t2, task1, task2, [], grid)


def test_edit_distance_known_value():
    spec, theta, head = _linear_problem()
    shifted = theta + nw.flatten(spec, [(np.zeros((3, 3)), np.array([1.0, 2.0, 2.0]))])
    assert mt.edit_distance(spec, theta, shifted, np.zeros(3)) == pytest.approx(3.0)


def test_localization_profile_single_task_has_no_ood():
    spec, theta, head = _linear_problem()
    cells = mt.localization_profile(spec, theta, [theta], [(np.eye(3), np.arange(3))])
    assert cells[0].out_of_domain is None and cells[0].summary()["out_of_domain"] is None
    with pytest.raises(ConfigError):
        mt.localization_profile(spec, theta, [theta, theta], [(np.eye(3), np.arange(3))])


def test_eval_report():
    r = mt.EvalReport("delta", 1.0, ["a", "b"], [0.5, 0.8], [1.0, 0.8])
    assert r.normalized == [50.0, 100.0] and r.mean_normalized == 75.0
    assert r.mean_absolute == pytest.approx(0.65)
    assert "mean" in r.to_text() and r.to_dict()["method"] == "delta"
    assert mt.EvalReport("x", 1.0, ["a"], [0.5], [0.0]).mean_normalized is None
    with pytest.raises(DataError):
        mt.EvalReport("x", 1.0, ["a"], [1.5])


def test_empty_dataset_rejected():
    spec, theta, head = _linear_problem()
    with pytest.raises(DataError):
        mt.accuracy(spec, theta, head, (np.zeros((0, 3)), np.zeros(0, int)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1.5), st.floats(0, 1.5))
def test_disentanglement_bounded_and_symmetric(seed, a1, a2):
    spec, theta, rng = random_net(seed % 30, dims=(3, 4, 3))
    head = nw.Head.random(3, 3, seed)
    t1, t2 = rng.standard_normal((2, spec.param_count))
    task1 = (rng.standard_normal((6, 3)), np.zeros(6, int))
    task2 = (rng.standard_normal((6, 3)), np.zeros(6, int))
    e = mt.disentanglement_error(spec, theta, head, t1, t2, a1, a2, task1, task2)
    assert 0.0 <= e <= 2.0
    swapped = mt.disentanglement_error(spec, theta, head, t2, t1, a2, a1, task2, task1)
    assert e == pytest.approx(swapped)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_edit_distance_nonnegative_and_zero_at_base(seed):
    spec, theta, rng = random_net(seed % 30)
    X = rng.standard_normal((4, spec.input_dim))
    assert np.all(mt.edit_distance(spec, theta, theta, X) == 0)
    assert np.all(mt.edit_distance(spec, theta, theta + rng.standard_normal(spec.param_count), X) >= 0)
