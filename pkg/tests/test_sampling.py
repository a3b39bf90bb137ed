import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajflow.network import ModelConfig, init_params
from trajflow.sampling import (CONSISTENCY, ODE, SamplerConfig, check_timesteps, default_intermediate,
                               delta_oracle, generate, make_timesteps, resolve_labels)

X0 = np.array([0.5, -0.5])


@pytest.mark.parametrize("mode", [ODE, CONSISTENCY])
@pytest.mark.parametrize("nfe", [1, 2, 4])
def test_oracle_lands_on_point_mass(mode, nfe):
    z, labels = generate(delta_oracle(X0), SamplerConfig(mode, make_timesteps(nfe), 200, seed=3))
    assert labels is None
    assert np.max(np.abs(z - X0)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=0, max_size=5, unique=True), st.integers(0, 1000))
def test_oracle_exact_for_any_grid(inner, seed):
    ts = (1.0, *sorted(inner, reverse=True), 0.0)
    z, _ = generate(delta_oracle(X0), SamplerConfig(ODE, ts, 16, seed=seed))
    assert np.max(np.abs(z - X0)) < 1e-12


def test_zero_network_ode_keeps_the_noise():
    params = init_params(ModelConfig(hidden_dims=(4,)))
    cfg = SamplerConfig(ODE, make_timesteps(3), 50, seed=5)
    z, _ = generate(params, cfg)
    noise = np.random.default_rng(5).standard_normal((50, 2))
    np.testing.assert_array_equal(z, noise)


def test_one_step_modes_agree():
    params = init_params(ModelConfig(hidden_dims=(8,)))
    params = params.map(lambda k, v: v + 0.3 * np.random.default_rng(1).standard_normal(v.shape))
    a, _ = generate(params, SamplerConfig(ODE, (1.0, 0.0), 64, seed=2))
    b, _ = generate(params, SamplerConfig(CONSISTENCY, (1.0, 0.0), 64, seed=2))
    np.testing.assert_array_equal(a, b)


def test_consistency_renoises_between_steps():
    # a callable that always predicts zero leaves only the re-noising term
    zero = lambda z, r, t, labels=None: np.zeros_like(z)  # noqa: E731
    z, _ = generate(zero, SamplerConfig(CONSISTENCY, (1.0, 0.5, 0.0), 10, seed=0))
    rng = np.random.default_rng(0)
    first = rng.standard_normal((10, 2))
    second = rng.standard_normal((10, 2))
    np.testing.assert_allclose(z, first + 0.5 * second, atol=1e-15)


def test_timestep_validation():
    for bad in [(1.0,), (0.9, 0.0), (1.0, 0.1), (1.0, 0.5, 0.5, 0.0), (1.0, 0.3, 0.6, 0.0)]:
        with pytest.raises(ValueError):
            check_timesteps(bad)
    with pytest.raises(ValueError):
        SamplerConfig(mode="euler")
    with pytest.raises(ValueError):
        make_timesteps(0)
    assert make_timesteps(1) == (1.0, 0.0)
    assert make_timesteps(2) == (1.0, 0.5, 0.0)
    assert make_timesteps(2, mid=0.3) == (1.0, 0.3, 0.0)
    assert make_timesteps(4) == (1.0, 0.75, 0.5, 0.25, 0.0)
    assert SamplerConfig(timesteps=make_timesteps(4)).nfe == 4


def test_default_intermediate():
    assert default_intermediate() == 0.5
    assert default_intermediate("unknown") == 0.5


def test_label_resolution():
    rng = np.random.default_rng(0)
    assert resolve_labels(None, 5, 0, rng) is None
    np.testing.assert_array_equal(resolve_labels("balanced", 5, 2, rng), [0, 1, 0, 1, 0])
    np.testing.assert_array_equal(resolve_labels(3, 4, 8, rng), [3, 3, 3, 3])
    drawn = resolve_labels(None, 1000, 8, rng)
    assert set(np.unique(drawn)) == set(range(8))
    with pytest.raises(ValueError):
        resolve_labels("uniform", 3, 2, rng)
    with pytest.raises(ValueError):
        resolve_labels([0, 1], 3, 2, rng)


def test_conditional_generation_returns_labels_and_is_seeded():
    params = init_params(ModelConfig(hidden_dims=(8,), num_classes=3))
    z1, l1 = generate(params, SamplerConfig(num_samples=20, labels="balanced", seed=9))
    z2, l2 = generate(params, SamplerConfig(num_samples=20, labels="balanced", seed=9))
    np.testing.assert_array_equal(z1, z2)
    np.testing.assert_array_equal(l1, np.arange(20) % 3)
