import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from autoprune.errors import SingularGram
from autoprune.model import init_bundle
from autoprune.stats import (
    SkewnessReport,
    compute_activation_stats,
    hessian_inverse_diag,
    magnitude_skewness,
    normalize_skewness,
    skewness_report,
)

from .conftest import TOY_TOPOLOGY


def naive_skewness(values):
    """Three passes with exactly-rounded sums."""
    a = [abs(float(v)) for v in values]
    n = len(a)
    mean = math.fsum(a) / n
    m2 = math.fsum((x - mean) ** 2 for x in a) / n
    if m2 < 1e-24:
        return 0.0
    m3 = math.fsum((x - mean) ** 3 for x in a) / n
    return m3 / m2**1.5


@pytest.mark.parametrize(
    "values, expected",
    [([1, -2, 3], 0.0), ([0, 0, 0, 4], 2 / math.sqrt(3)), ([5, -5, 5, -5], 0.0)],
)
def test_skewness_examples(values, expected):
    assert magnitude_skewness(values) == pytest.approx(expected, abs=1e-9)


def test_skewness_matches_oracle_on_mixed_vectors(rng):
    for _ in range(50):
        n = int(rng.integers(10, 3000))
        v = rng.normal(size=n) if rng.random() < 0.5 else rng.lognormal(0, 1.5, size=n)
        assert abs(magnitude_skewness(v) - naive_skewness(v)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 200), elements=st.floats(-1e3, 1e3)))
def test_skewness_sign_and_scale_invariance(v):
    g = magnitude_skewness(v)
    assert math.isfinite(g)
    assert magnitude_skewness(-v) == pytest.approx(g, abs=1e-9)
    if np.var(np.abs(v)) > 1e-6:
        assert magnitude_skewness(3.0 * v) == pytest.approx(g, abs=1e-6)


def test_normalize_examples():
    tilde, mean, spread = normalize_skewness([0.0, 1.0, 2.0])
    assert np.allclose(tilde, [-1, 0, 1], atol=1e-7)
    assert mean == 1.0 and spread == 1.0
    assert np.array_equal(normalize_skewness([4.2])[0], [0.0])
    assert np.array_equal(normalize_skewness([3.0, 3.0, 3.0])[0], [0.0, 0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40))
def test_normalized_values_in_unit_interval(gammas):
    tilde, mean, _ = normalize_skewness(gammas)
    assert np.all(np.abs(tilde) <= 1.0)
    assert mean == pytest.approx(float(np.mean(gammas)), abs=1e-12)


def test_report_cardinality(toy_bundle):
    assert len(skewness_report(toy_bundle, "per_layer").per_layer) == 12
    blocks = skewness_report(toy_bundle, "per_block")
    assert list(blocks.names) == ["blocks.0", "blocks.1"]


def test_report_mean_and_range(fixture_bundle):
    rep = skewness_report(fixture_bundle)
    assert rep.mean_gamma == pytest.approx(np.mean(rep.gammas), abs=1e-12)
    assert np.all(np.abs(rep.gamma_tilde) <= 1.0)
    assert rep.delta_gamma_tilde == pytest.approx(rep.gamma_tilde.max() - rep.gamma_tilde.min())
    lines = rep.to_csv().splitlines()
    assert lines[0] == "layer,gamma,gamma_tilde" and len(lines) == 13


def test_heavy_tailed_block_has_larger_skew():
    rng = np.random.default_rng(5)
    base = init_bundle(TOY_TOPOLOGY, seed=1)
    weights = {}
    for rec in base.layers:
        if rec.block == 0:
            weights[rec.name] = rng.standard_t(2.5, size=rec.shape)
        else:
            weights[rec.name] = rng.normal(size=rec.shape)
    bundle = base.with_weights(weights)
    rep = skewness_report(bundle, "per_block")
    block0 = np.concatenate([bundle.layer(n).weight.ravel() for n in bundle.layer_names[:6]])
    assert rep.per_layer[0].gamma == pytest.approx(magnitude_skewness(block0), abs=1e-12)
    assert rep.per_layer[0].gamma > rep.per_layer[1].gamma


def test_report_from_gammas_round_trip():
    rep = SkewnessReport.from_gammas(["a", "b", "c"], [0.0, 1.0, 2.0])
    # the normaliser: largest absolute deviation from the mean
    assert rep.delta_gamma == 1.0
    assert rep.to_dict()["per_layer"][0]["layer"] == "a"


def test_activation_stats_examples():
    st_ = compute_activation_stats({"l": np.eye(2)})["l"]
    assert np.array_equal(st_.col_l1, [1, 1]) and np.array_equal(st_.col_l2, [1, 1])
    st_ = compute_activation_stats({"l": np.array([[1.0, 2.0], [3.0, 4.0]])})["l"]
    assert np.array_equal(st_.col_l1, [4, 6])
    assert np.array_equal(st_.col_l2sq, [10, 20])


def test_activation_stats_invariants(rng):
    X = rng.normal(size=(50, 7))
    s = compute_activation_stats({"l": X}, keep_raw=True, with_hessian=True)["l"]
    assert np.allclose(s.col_l2**2, s.col_l2sq, rtol=1e-9)
    assert np.all(s.col_l1 >= 0) and np.all(s.col_l2 >= 0) and np.all(s.hess_diag > 0)
    assert s.d_in == 7 and np.array_equal(s.raw, X)


def test_hessian_diag_matches_dense_inverse(rng):
    X = rng.normal(size=(40, 6))
    lam = 0.3
    expected = np.diag(np.linalg.inv(X.T @ X + lam * np.eye(6)))
    assert np.allclose(hessian_inverse_diag(X, lam), expected, rtol=1e-10)


def test_singular_gram():
    with pytest.raises(SingularGram):
        compute_activation_stats({"l": np.zeros((4, 3))}, lam=0.0, with_hessian=True)
