import numpy as np
import pytest

from riskfilter.envs import (ENV_NAMES, analytic_value_lin1d, chain_tensor, make_env, random_gridworld,
                             transition_tensor)
from riskfilter.errors import InvalidOverride, UnknownEnv, UnstableClosedLoop
from riskfilter.rng import substream
from riskfilter.safety import validate_cost_threshold

from oracles import lin1d_quadratic_value


def test_unknown_env():
    with pytest.raises(UnknownEnv):
        make_env("half-cheetah")


@pytest.mark.parametrize("overrides", [{"mass": -1.0}, {"noise_std": -0.1}, {"wheels": 4},
                                       {"v_crit": 20.0}, {"c_hat": 13.0}])
def test_dintegrator_rejects_bad_overrides(overrides):
    with pytest.raises(InvalidOverride):
        make_env("dintegrator", overrides)


def test_dintegrator_threshold_from_velocity_cap():
    env = make_env("dintegrator")
    assert env.safety.c_hat == 12.0
    rep = validate_cost_threshold(env.safety, env.unsafe_sampler, 10_000, substream(0, "t"))
    assert rep.ok and rep.min_unsafe_cost >= 12.0
    assert env.safety.gamma == 0.99
    x = np.array([[0.0, 2.0], [0.0, 2.0 + 1e-9]])
    np.testing.assert_array_equal(env.safety.is_safe(x), [True, False])


def test_lin1d_defaults_and_degenerate_override():
    env = make_env("lin1d")
    assert list(env.system.params) == [1.0, 0.5]
    assert env.safety.c_hat == 0.5 and env.safety.gamma == 0.9
    assert env.system.noise.kind == "gaussian-diagonal"
    assert make_env("lin1d", {"sigma": 0.0}).system.noise.kind == "degenerate"


def test_gridworld_with_hand_written_tensor():
    P = np.zeros((5, 2, 5))
    for s in range(5):
        P[s, 0, max(s - 1, 0)] = 0.7
        P[s, 0, s] += 0.3
        P[s, 1, min(s + 1, 4)] = 1.0
    env = make_env("gridworld", {"n": 5, "m": 2, "P": P})
    T = transition_tensor(env)
    np.testing.assert_allclose(T.sum(axis=2), 1.0, atol=1e-12)
    np.testing.assert_array_equal(T, P)
    with pytest.raises(InvalidOverride):
        make_env("gridworld", {"P": P * 1.01})
    with pytest.raises(InvalidOverride):
        make_env("gridworld", {"n": 6, "P": P})


def test_every_environment_validates_at_registration():
    for name in ENV_NAMES:
        env = make_env(name)
        rep = validate_cost_threshold(env.safety, env.unsafe_sampler, 10_000, substream(1, name))
        assert rep.ok


def test_random_gridworlds_are_stochastic(rng):
    for _ in range(5):
        env = random_gridworld(10, 3, rng)
        np.testing.assert_allclose(transition_tensor(env).sum(axis=2), 1.0, atol=1e-12)


def test_held_out_member_is_not_in_training_ensemble():
    env = make_env("dintegrator")
    ens, held = env.make_ensemble(10, 0)
    masses = [m.params[0] for m in ens.members]
    assert len(set(masses)) == 10 and held.params[0] not in masses
    assert all(0.5 <= m <= 1.5 for m in masses)
    ens2, held2 = env.make_ensemble(10, 0)
    assert [m.params[0] for m in ens2.members] == masses and held2.params[0] == held.params[0]


def test_analytic_value_special_cases():
    env = make_env("lin1d", {"sigma": 0.0})
    V = analytic_value_lin1d(env, 2.0)  # q = 1 - 0.5 * 2 = 0
    x = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(V(x), x * x)
    np.testing.assert_allclose(analytic_value_lin1d(make_env("lin1d"), 0.5, gamma=1e-12)(x), x * x, atol=1e-12)
    with pytest.raises(UnstableClosedLoop):
        analytic_value_lin1d(env, -1.0)


def test_analytic_value_matches_series_oracle():
    env = make_env("lin1d")
    x = np.linspace(-2, 2, 11)
    np.testing.assert_allclose(analytic_value_lin1d(env, 0.5)(x),
                               lin1d_quadratic_value(x, 1.0, 0.5, 0.5, 0.05, 0.9), rtol=1e-12)


def test_analytic_value_at_origin_by_monte_carlo():
    env = make_env("lin1d")
    rng = np.random.default_rng(0)
    n, horizon, q, gamma = 20_000, 200, 0.75, 0.9
    x = np.zeros(n)
    total = np.zeros(n)
    for t in range(horizon):
        total += gamma ** t * x * x
        x = q * x + 0.05 * rng.standard_normal(n)
    ref = analytic_value_lin1d(env, 0.5)(np.zeros(1))[0]
    assert abs(total.mean() - ref) <= 4 * total.std() / np.sqrt(n)


def test_chain_tensor_rows():
    np.testing.assert_allclose(chain_tensor(7, 0.2).sum(axis=2), 1.0)
