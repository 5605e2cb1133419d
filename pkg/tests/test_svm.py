import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covertlab.model import Label, RecordSet
from covertlab.svm import (
    KernelParams,
    ModelFormatError,
    TrainedModel,
    kkt_violations,
    full_multipliers,
    load_model,
    predict,
    rbf_kernel,
    save_model,
    train,
)

from conftest import two_clusters


def test_rbf_kernel_values():
    assert rbf_kernel([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], 0.7) == 1.0
    assert rbf_kernel([0.0, 0.0], [1.0, 0.0], 1.0) == pytest.approx(0.36787944117144233, abs=1e-15)
    with pytest.raises(ValueError):
        rbf_kernel([0.0], [1.0], 0.0)


def test_two_points():
    # after scaling the points sit at +-1 on one axis, gamma resolves to 1, K12 = e^-4;
    # with C = 1 both multipliers hit the box and f(x+) = 1 - e^-4, bias 0
    rs = RecordSet(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), np.array([1, -1]))
    model = train(rs)
    assert model.n_support == 2
    assert model.params.gamma == pytest.approx(1.0)
    f = model.decision_function(rs.features)
    assert f[0] == pytest.approx(1 - math.exp(-4), abs=1e-9)
    assert f[1] == pytest.approx(-(1 - math.exp(-4)), abs=1e-9)
    assert predict(model, rs.features[0])[0] is Label.COVERT
    assert predict(model, rs.features[1])[0] is Label.OVERT


def test_xor_decision_values():
    # scaled corners (+-1, +-1), gamma 1/2: neighbours e^-2, opposite e^-4;
    # symmetric solution a_i = C = 1 gives |f| = (1 - e^-2)^2 and bias 0
    X = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    y = np.array([-1, -1, 1, 1])
    model = train(RecordSet(X, y))
    expected = y * (1 - math.exp(-2)) ** 2
    assert np.allclose(model.decision_function(X), expected, atol=1e-9)
    # a larger box lets the margin reach exactly 1: a = 1 / (1 - e^-2)^2
    hard = train(RecordSet(X, y), KernelParams(box_constraint=10.0, tolerance=1e-8))
    assert np.allclose(hard.decision_function(X), y, atol=1e-6)
    assert np.allclose(hard.multipliers, 1 / (1 - math.exp(-2)) ** 2, atol=1e-6)


def test_separable_clusters(separable):
    model = train(separable)
    assert np.array_equal(model.predict_labels(separable.features), separable.labels)


def test_kkt_and_dual_constraint():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 3))
    y = np.where(X[:, 0] + 0.5 * X[:, 1] ** 2 + 0.3 * rng.normal(size=300) > 0.4, 1, -1)
    rs = RecordSet(X, y)
    params = KernelParams(box_constraint=2.0, tolerance=1e-4)
    model = train(rs, params)
    a = full_multipliers(model, len(rs))
    assert abs(float(np.sum(a * rs.labels))) <= 1e-9
    assert np.all(a >= 0) and np.all(a <= params.box_constraint + 1e-12)
    assert kkt_violations(model, rs).max() <= 10 * params.tolerance


def test_permutation_invariance():
    rng = np.random.default_rng(11)
    rs = two_clusters(120, seed=3, gap=2.0, spread=0.8)
    perm = rng.permutation(len(rs))
    # the dual optimum is unique, so a tight stopping tolerance pins the decision function
    params = KernelParams(tolerance=1e-9)
    a = train(rs, params, seed=4)
    b = train(rs.subset(perm), params, seed=4)
    probe = rng.normal(0, 2, (1000, 3)) + np.array([0, 0, 50])
    assert np.max(np.abs(a.decision_function(probe) - b.decision_function(probe))) <= 1e-6
    assert np.array_equal(a.predict_labels(probe), b.predict_labels(probe))


def test_box_constraint_monotone():
    # separable along the first feature with a thin 0.1 margin
    rng = np.random.default_rng(8)
    x = np.r_[rng.uniform(0.05, 1, 100), -rng.uniform(0.05, 1, 100)]
    rs = RecordSet(np.c_[x, rng.normal(size=200), rng.normal(size=200)], np.r_[np.ones(100), -np.ones(100)])
    acc = []
    for C in (0.1, 10.0, 1000.0):
        model = train(rs, KernelParams(box_constraint=C))
        acc.append(np.mean(model.predict_labels(rs.features) == rs.labels))
    assert acc == sorted(acc)
    assert acc[0] < 1.0 and acc[-1] == 1.0


def test_single_class_and_non_finite():
    with pytest.raises(ValueError):
        train(RecordSet(np.zeros((4, 3)), np.ones(4)))
    X = np.zeros((2, 3))
    X[0, 0] = np.nan
    with pytest.raises(ValueError):
        train(RecordSet(X, np.array([1, -1])))


def test_zero_support_vectors_invalid():
    model = TrainedModel(np.empty((0, 3)), np.empty(0), np.empty(0), 0.0, KernelParams(gamma=1.0),
                         train(two_clusters(4)).scaling)
    with pytest.raises(ValueError):
        model.decision_function(np.zeros(3))


def test_save_load_round_trip(tmp_path, separable):
    model = train(separable, KernelParams(box_constraint=5.0))
    p = tmp_path / "m.model"
    save_model(model, p)
    back = load_model(p)
    probe = np.random.default_rng(0).normal(0, 3, (100, 3)) + np.array([0, 0, 50])
    assert np.max(np.abs(model.decision_function(probe) - back.decision_function(probe))) <= 1e-12
    assert back.params == model.params


def test_corrupt_model_file(tmp_path, separable):
    p = tmp_path / "m.model"
    save_model(train(separable), p)
    lines = p.read_text().splitlines()
    bad = tmp_path / "bad.model"
    bad.write_text("\n".join(lines[:-1] + ["0.5,covert,1.0,zz,3.0"]) + "\n")
    with pytest.raises(ModelFormatError):
        load_model(bad)
    bad.write_text("not a model\n")
    with pytest.raises(ModelFormatError):
        load_model(bad)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 20.0))
def test_dual_feasibility_property(seed, C):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    y = np.r_[np.ones(20), -np.ones(20)]
    X[:20, 0] += 1.0
    model = train(RecordSet(X, y), KernelParams(box_constraint=C), seed=seed)
    a = full_multipliers(model, 40)
    assert abs(float(np.sum(a * y))) <= 1e-9
    assert np.all(a <= C + 1e-12)
