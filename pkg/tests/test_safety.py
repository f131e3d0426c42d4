import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskfilter.errors import DegenerateDenominator, EmptyUnsafeSample, InvalidOverride
from riskfilter.policy import train_safe
from riskfilter.safety import (SafetySpec, ThetaConstants, c_hat_lower_bound, check_value_envelopes,
                               fit_theta, validate_cost_threshold)

from oracles import linear_solve_value, policy_matrix


def spec(cost, c_hat=1.0, safe=lambda X: X[:, 0] <= 0.0):
    return SafetySpec(safe, cost, c_hat, 0.9)


def unsafe_sampler(n, rng):
    return rng.uniform(0.01, 1.0, size=(n, 1))


def test_threshold_report_flags_zero_cost(rng):
    rep = validate_cost_threshold(spec(lambda X: np.zeros(len(X))), unsafe_sampler, 100, rng)
    assert not rep.ok and rep.witness.shape == (1,)


def test_indicator_cost_passes_with_equality(rng):
    M = 7.0
    s = spec(lambda X: M * (X[:, 0] > 0), c_hat=M)
    rep = validate_cost_threshold(s, unsafe_sampler, 100, rng)
    assert rep.ok and rep.min_unsafe_cost == M


def test_empty_unsafe_sample(rng):
    with pytest.raises(EmptyUnsafeSample):
        validate_cost_threshold(spec(lambda X: X[:, 0]), lambda n, r: np.empty((0, 1)), 10, rng)
    with pytest.raises(EmptyUnsafeSample):
        validate_cost_threshold(spec(lambda X: X[:, 0]), lambda n, r: -np.ones((n, 1)), 10, rng)


def test_spec_rejects_bad_discount():
    with pytest.raises(InvalidOverride):
        SafetySpec(lambda X: X, lambda X: X, 1.0, 1.0)


def test_c_hat_bound_examples():
    assert c_hat_lower_bound(ThetaConstants(50, 1, 1, 0), 0.99) == 2.0
    assert c_hat_lower_bound(ThetaConstants(50, 0, 1, 0), 0.99) == 0.0
    th = ThetaConstants(5.0, 1.0, 2.0, 0.0)
    # the offset cancels exactly only with theta3 = 1
    t4 = 1.0 / (5.0 * 0.9 - 5.0 + 1.0)
    assert c_hat_lower_bound(ThetaConstants(5.0, 1.0, 1.0, t4), 0.9) == pytest.approx(0.0, abs=1e-15)
    assert c_hat_lower_bound(th, 0.9) > 0
    with pytest.raises(DegenerateDenominator):
        c_hat_lower_bound(ThetaConstants(100, 1, 1, 0), 0.99)
    with pytest.raises(DegenerateDenominator):
        c_hat_lower_bound(ThetaConstants(5, 1, 0, 0), 0.9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 9.0), st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5), st.floats(0, 5),
       st.floats(0, 5))
def test_c_hat_bound_monotone(t1, t2a, t2b, t3, t4a, t4b):
    g = 0.9
    lo2, hi2 = sorted((t2a, t2b))
    lo4, hi4 = sorted((t4a, t4b))
    assert c_hat_lower_bound(ThetaConstants(t1, lo2, t3, lo4), g) <= c_hat_lower_bound(ThetaConstants(t1, hi2, t3, lo4), g)
    assert c_hat_lower_bound(ThetaConstants(t1, lo2, t3, hi4), g) <= c_hat_lower_bound(ThetaConstants(t1, lo2, t3, lo4), g)


def test_envelope_examples():
    X = np.linspace(-1, 1, 5)[:, None]
    s = spec(lambda X: np.ones(len(X)))
    rep = check_value_envelopes(ThetaConstants(1.0, 0.0), s, lambda X: np.zeros(len(X)), X)
    assert rep.upper_ok
    assert not rep.lower_ok and rep.worst_lower_gap == 1.0
    rep = check_value_envelopes(ThetaConstants(0.5, 0.0), s, lambda X: np.ones(len(X)), X)
    assert not rep.upper_ok and rep.worst_upper_gap == pytest.approx(0.5)


def test_trivial_lower_envelope_holds_for_learned_values(gridworld):
    env, ens, _ = gridworld
    _, V = train_safe(ens, env.safety, env.grid, env.controls)
    rep = check_value_envelopes(ThetaConstants(1.0, 0.0, 1.0, 0.0), env.safety, V, V.nodes())
    assert rep.lower_ok


def test_fit_theta_against_brute_force(gridworld):
    env, ens, P = gridworld
    pol, _ = train_safe(ens, env.safety, env.grid, env.controls)
    c = env.safety.cost(env.grid.nodes())
    actions = np.rint(pol(env.grid.nodes())[:, 0]).astype(int)
    V = linear_solve_value(policy_matrix(P, actions), c, 0.9)
    th = fit_theta(V, c, 0.9)
    # brute force: theta2 is the largest V - theta1 c over states
    assert th.theta2 == pytest.approx(max(0.0, float(np.max(V - th.theta1 * c))), abs=1e-12)
    rep = check_value_envelopes(th, env.safety, lambda X: np.interp(X[:, 0], np.arange(10), V),
                                env.grid.nodes(), tol=1e-12)
    assert rep.upper_ok and rep.lower_ok
    assert th.premise_ok(0.9)
