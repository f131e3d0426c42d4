import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riskfilter.dynamics import ModelEnsemble, NoiseSpec, SystemSpec, draw
from riskfilter.risk import (RiskParams, risk_next_value, risk_of_samples, risk_rows, risk_standard_error,
                             successor_values)
from riskfilter.value import Grid, ValueFunction

from oracles import gaussian_risk, two_point_risk

samples_st = arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50))


def test_two_point_exact():
    assert abs(risk_of_samples([0.0, 1.0], 1.0) - two_point_risk(1.0)) <= 1e-12


def test_degenerate_law_is_its_value():
    assert risk_of_samples([3.25] * 7, 5.0) == 3.25


def test_huge_beta_is_stable():
    r = risk_of_samples([0.0, 1000.0], 50.0)
    assert math.isfinite(r) and r == pytest.approx(1000.0 - math.log(2) / 50.0)


@pytest.mark.parametrize("mu,sigma,beta", [(0, 0.5, 0.1), (1, 1, 1)])
def test_gaussian_risk_mc(mu, sigma, beta):
    x = np.random.default_rng(0).normal(mu, sigma, size=400_000)
    assert abs(risk_of_samples(x, beta) - gaussian_risk(mu, sigma, beta)) <= 2e-2


def test_weighted_form_matches_repetition():
    assert risk_of_samples([0.0, 1.0], 2.0, [0.25, 0.75]) == pytest.approx(
        risk_of_samples([0.0, 1.0, 1.0, 1.0], 2.0), abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(samples_st, st.floats(1e-3, 5), st.floats(1e-3, 5))
def test_monotone_in_beta(v, b1, b2):
    lo, hi = sorted((b1, b2))
    assert risk_of_samples(v, lo) <= risk_of_samples(v, hi) + 1e-9


@settings(max_examples=100, deadline=None)
@given(samples_st, st.floats(1e-3, 5), st.floats(-100, 100))
def test_bounds_and_translation(v, beta, shift):
    r = risk_of_samples(v, beta)
    assert v.mean() - 1e-9 <= r <= v.max() + 1e-9
    assert risk_of_samples(v + shift, beta) == pytest.approx(r + shift, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(samples_st)
def test_small_beta_tends_to_mean(v):
    assert risk_of_samples(v, 1e-8) == pytest.approx(v.mean(), abs=1e-4)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        RiskParams(0.0)
    with pytest.raises(ValueError):
        risk_of_samples([], 1.0)
    with pytest.raises(FloatingPointError):
        risk_of_samples([np.inf], 1.0)


def test_standard_error_scales_like_root_n():
    rng = np.random.default_rng(1)
    a = risk_standard_error(rng.normal(size=1000), 1.0)
    b = risk_standard_error(rng.normal(size=100_000), 1.0)
    assert a / b == pytest.approx(10.0, rel=0.15)


def _identity_ens(sigma):
    kind = "gaussian-diagonal" if sigma > 0 else "degenerate"
    return ModelEnsemble.single(SystemSpec("id", "identity", [], NoiseSpec(kind, [sigma]), [0.0], [20.0],
                                           [-1.0], [1.0]))


def test_risk_next_value_of_linear_value_is_gaussian_formula():
    ens = _identity_ens(0.5)
    V = ValueFunction(Grid([0.0], [20.0], [3]), np.array([0.0, 10.0, 20.0]))
    r = risk_next_value(ens, [10.0], [0.0], V, RiskParams(1.0, scheme="quadrature", quadrature_nodes=21))
    assert r == pytest.approx(gaussian_risk(10.0, 0.5, 1.0), abs=1e-10)


def test_common_random_numbers_across_controls():
    ens = _identity_ens(0.5)
    V = ValueFunction(Grid([0.0], [20.0], [3]), np.array([0.0, 10.0, 20.0]))
    d = draw(ens, 64, np.random.default_rng(3))
    stacked = risk_next_value(ens, [10.0], [[0.0], [0.5], [1.0]], V, RiskParams(0.7), draws=d)
    single = [risk_next_value(ens, [10.0], [u], V, RiskParams(0.7), draws=d) for u in (0.0, 0.5, 1.0)]
    np.testing.assert_allclose(stacked, single, rtol=0, atol=0)
    # linear V: successive controls shift every draw by the same amount
    assert stacked[1] - stacked[0] == pytest.approx(0.5, abs=1e-12)


def test_rows_agree_with_scalar_calls(rng):
    vals = rng.normal(size=(5, 8))
    w = np.full((5, 8), 1 / 8)
    np.testing.assert_allclose(risk_rows(vals, w, 0.3), [risk_of_samples(v, 0.3) for v in vals], atol=1e-13)


def test_successor_values_mc_needs_generator():
    ens = _identity_ens(0.1)
    V = ValueFunction(Grid([0.0], [20.0], [3]), np.array([0.0, 10.0, 20.0]))
    with pytest.raises(ValueError):
        successor_values(ens, np.ones((2, 1)), np.zeros((2, 1)), V, RiskParams(1.0))
