import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from trajflow import TrajectoryFlowGenerator
from trajflow.paths import sample_dataset


def small(**kw):
    base = dict(steps=20, batch_size=16, hidden_dims=(8,), k_start=5, k_end=10)
    base.update(kw)
    return TrajectoryFlowGenerator(**base)


def test_params_round_trip_through_clone():
    est = small(alpha=0.5, guidance=True)
    copy = clone(est)
    assert copy.get_params() == est.get_params()
    copy.set_params(steps=3)
    assert copy.steps == 3 and est.steps == 20


def test_unconditional_fit_sample_score():
    X, _ = sample_dataset("two_moons", 200, seed=0)
    est = small().fit(X)
    assert est.n_features_in_ == 2
    assert len(est.training_log_) >= 1
    Z = est.sample(50, random_state=1)
    assert Z.shape == (50, 2)
    np.testing.assert_array_equal(Z, est.sample(50, random_state=1))
    assert est.score(X[:40]) <= 0
    assert est.sample(10, nfe=2, mode="consistency").shape == (10, 2)


def test_conditional_fit_maps_original_classes():
    X, y = sample_dataset("eight_gaussians", 200, seed=0)
    names = np.array(list("abcdefgh"))[y]
    est = small(guidance=True).fit(X, names)
    np.testing.assert_array_equal(est.classes_, list("abcdefgh"))
    Z, labels = est.sample(16, labels=["c"] * 16)
    assert Z.shape == (16, 2) and set(labels) == {"c"}
    with pytest.raises(ValueError, match="seen during fit"):
        est.sample(2, labels=["z", "a"])


def test_higher_dimensional_data_and_sample_weights():
    X = np.random.default_rng(0).standard_normal((60, 3))
    est = small(sample_weights="ema").fit(X)
    assert est.sample(5).shape == (5, 3)
    with pytest.raises(ValueError, match="features"):
        est.score(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        small(sample_weights="live").fit(X)


def test_validation():
    with pytest.raises(NotFittedError):
        small().sample(3)
    with pytest.raises(ValueError):
        small().fit(np.zeros((5, 2)), np.zeros(4))
    with pytest.raises(ValueError):
        small().fit(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_fit_is_deterministic_for_fixed_seed():
    X, _ = sample_dataset("checkerboard", 100, seed=2)
    a = small(random_state=3).fit(X)
    b = small(random_state=3).fit(X)
    np.testing.assert_array_equal(a.params_.flat(), b.params_.flat())
