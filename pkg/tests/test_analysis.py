import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import cosine as scipy_cosine_distance

from trajflow.analysis import (COSINE_HEADER, LOSS_TERM_NAMES, UndefinedCosine, cosine, cosine_protocol,
                               energy_distance, eval_loss_suite, fresh_batches, grad_cosine_pair,
                               loss_gradient, write_cosine_csv, write_loss_suite_csv)
from trajflow.network import ModelConfig, init_params
from trajflow.paths import make_batch, sample_dataset


def random_params(seed=0, hidden=(16, 16), num_classes=0):
    params = init_params(ModelConfig(hidden_dims=hidden, num_classes=num_classes))
    rng = np.random.default_rng(seed)
    return params.map(lambda k, v: v + 0.3 * rng.standard_normal(v.shape))


@pytest.fixture(scope="module")
def params():
    return random_params()


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(4)
    x, _ = sample_dataset("eight_gaussians", 64, seed=4)
    return make_batch(rng, x, ratio_r_eq_t=0.25)


def test_self_and_negated_cosine(params, batch):
    assert grad_cosine_pair(params, batch, "tc_c", "tc_c") == 1.0
    g = loss_gradient(params, batch, "tfm")
    assert cosine(g, -g) == pytest.approx(-1.0, abs=1e-15)
    assert cosine(g, 3.0 * g) == pytest.approx(1.0, abs=1e-15)


def test_cosine_matches_reordered_reference(params, batch):
    ga = loss_gradient(params, batch, "tfm")
    gb = loss_gradient(params, batch, "tc_c")
    perm = np.random.default_rng(0).permutation(ga.size)
    reference = 1.0 - scipy_cosine_distance(ga[perm], gb[perm])
    assert abs(grad_cosine_pair(params, batch, "tfm", "tc_c") - reference) < 1e-12


def test_zero_gradient_is_undefined():
    with pytest.raises(UndefinedCosine):
        cosine(np.zeros(3), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)))
def test_cosine_is_bounded_and_symmetric(a, b):
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine(b, a)


def test_protocol_is_deterministic_and_percentiles_match_sort(params):
    pairs = [("tfm", "tc_c"), ("fm_prime", "tc_c"), ("tfm", "tfm")]
    reports, raw = cosine_protocol(params, pairs, iterations=20, batch_size=32, seed=3)
    again, raw2 = cosine_protocol(params, pairs, iterations=20, batch_size=32, seed=3)
    assert reports == again and raw == raw2
    for rep in reports:
        values = np.sort(raw[rep.pair])
        assert len(values) == 20 and rep.undefined == 0
        # linear interpolation between order statistics at rank q (n - 1)
        for q, got in ((0.05, rep.p05), (0.95, rep.p95)):
            pos = q * (len(values) - 1)
            lo = int(np.floor(pos))
            expected = values[lo] + (pos - lo) * (values[min(lo + 1, len(values) - 1)] - values[lo])
            assert got == pytest.approx(expected, abs=1e-15)
        assert rep.mean == pytest.approx(sum(raw[rep.pair]) / 20, abs=1e-15)
    assert reports[2].mean == pytest.approx(1.0, abs=1e-15)
    assert reports[2].p05 == pytest.approx(1.0, abs=1e-15)
    other, _ = cosine_protocol(params, pairs, iterations=20, batch_size=32, seed=4)
    assert other != reports


def test_protocol_marks_zero_network_as_undefined():
    zero = init_params(ModelConfig(hidden_dims=(8,)))
    # only the output layer has gradient for the zero network; tc_c vanishes entirely
    reports, raw = cosine_protocol(zero, [("tfm", "tc_c")], iterations=3, batch_size=16)
    assert reports[0].undefined == 3
    assert np.isnan(reports[0].mean)
    assert all(np.isnan(raw["tfm:tc_c"]))
    with pytest.raises(ValueError):
        cosine_protocol(zero, iterations=0)


def test_fresh_batches_drop_labels_for_unconditional_models(params):
    batches = list(fresh_batches(params, 2, 8, seed=0))
    assert all(b.labels is None for b in batches)
    cond = random_params(num_classes=8)
    assert all(b.labels is not None for b in fresh_batches(cond, 2, 8, seed=0))


def test_loss_suite_on_zero_network():
    zero = init_params(ModelConfig(hidden_dims=(8,)))
    summaries, per_batch = eval_loss_suite(zero, fresh_batches(zero, 5, 64, seed=0))
    by_name = {s.name: s for s in summaries}
    assert [s.name for s in summaries] == list(LOSS_TERM_NAMES)
    assert by_name["l_tc_c"].mean == 0.0
    assert by_name["c_const"].mean == 0.0
    assert by_name["l_tfm"].mean == by_name["l_mf"].mean
    assert len(per_batch) == 5
    with pytest.raises(ValueError):
        eval_loss_suite(zero, [])


def test_decomposition_constant_spread_shrinks_with_batch_size(params):
    def spread(batch_size):
        _, per_batch = eval_loss_suite(params, fresh_batches(params, 20, batch_size, seed=1))
        return np.std([t.c_const for t in per_batch])

    assert spread(512) < spread(32)


def test_csv_formats(tmp_path, params):
    reports, raw = cosine_protocol(params, iterations=3, batch_size=16)
    write_cosine_csv(tmp_path / "cos.csv", reports, raw)
    with open(tmp_path / "cos.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == COSINE_HEADER
    assert len(rows) == 1 + 2 * 3 + 2 * 3
    assert rows[1][:2] == ["tfm:tc_c", "0"]
    assert float(rows[1][2]) == raw["tfm:tc_c"][0]
    assert [r[1] for r in rows[-3:]] == ["mean", "p05", "p95"]
    assert float(rows[-3][2]) == reports[1].mean

    summaries, per_batch = eval_loss_suite(params, fresh_batches(params, 2, 16, seed=0))
    write_loss_suite_csv(tmp_path / "loss.csv", summaries, per_batch)
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["term", "batch", "value"]
    assert len(rows) == 1 + 2 * len(LOSS_TERM_NAMES) + 3 * len(LOSS_TERM_NAMES)


def test_energy_distance_hand_values():
    a = np.array([[0.0, 0.0]])
    b = np.array([[3.0, 4.0]])
    assert energy_distance(a, b) == 10.0
    X = np.random.default_rng(0).standard_normal((50, 2))
    assert energy_distance(X, X) == 0.0
    with pytest.raises(ValueError):
        energy_distance(np.zeros((2, 2)), np.zeros((2, 3)))


def test_energy_distance_separates_shifted_gaussians():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((500, 1))
    B = rng.standard_normal((500, 1)) + 10.0
    assert energy_distance(A, B) > 15.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 10_000))
def test_energy_distance_symmetric_and_non_negative(n, m, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((n, 2)), rng.standard_normal((m, 2)) * 2
    assert energy_distance(A, B) == energy_distance(B, A)
    assert energy_distance(A, B) >= -1e-12
