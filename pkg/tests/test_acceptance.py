"""Acceptance gate. Each test carries a ``criterion`` marker and shows up as one
PASS/FAIL line in the terminal summary."""
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from riskfilter.certify import (DEFAULT_BETA_GRID, exact_exit_probability, kstep_stay_probability,
                                lemma3_decrease_bound, mc_delta_safety, verify_prop1)
from riskfilter.dynamics import ModelEnsemble, SamplingConfig, step
from riskfilter.envs import analytic_value_lin1d, make_env, random_gridworld, transition_tensor
from riskfilter.errors import CertificationRefused, StageError
from riskfilter.harness import NOMINAL, Experiment, ExperimentConfig, report, run_algorithm1
from riskfilter.policy import LinearPolicy, train_safe
from riskfilter.risk import RiskParams, risk_of_samples
from riskfilter.safety import SafetySpec, ThetaConstants, c_hat_lower_bound, fit_theta
from riskfilter.safety_filter import FilteredPolicy
from riskfilter.value import Grid, ValueFunction, bellman_residual, compute_xibar, policy_evaluation

from oracles import (exact_policy_value, gaussian_risk, lin1d_quadratic_value, linear_solve_value,
                     policy_iteration, policy_matrix, two_point_risk)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _actions(policy, grid):
    return np.rint(policy(grid.nodes())[:, 0]).astype(int)


@pytest.mark.criterion(1, "entropic risk of N(mu, sigma^2) from 1e6 samples within 1e-2 of mu + beta sigma^2/2")
def test_criterion_01_gaussian_risk():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for mu in (0.0, 1.0):
        for sigma in (0.5, 1.0):
            for beta in (0.1, 1.0):
                samples = mu + sigma * rng.standard_normal(1_000_000)
                assert abs(risk_of_samples(samples, beta) - gaussian_risk(mu, sigma, beta)) <= 1e-2
    assert time.perf_counter() - t0 < 10.0


@pytest.mark.criterion(2, "two-point risk at beta=1 equals ln((1+e)/2) within 1e-12")
def test_criterion_02_two_point_risk():
    assert abs(risk_of_samples([0.0, 1.0], 1.0) - math.log((1.0 + math.e) / 2.0)) <= 1e-12
    assert abs(risk_of_samples([0.0, 1.0], 1.0) - two_point_risk(1.0)) <= 1e-12


@pytest.mark.criterion(3, "exact exit probability below the Chernoff bound on 20 random gridworlds, every beta")
def test_criterion_03_empirical_chernoff():
    violations, checked = [], 0
    for k in range(20):
        env = random_gridworld(10, 2, np.random.default_rng(1000 + k))
        ens = ModelEnsemble.single(env.system)
        safe, V = train_safe(ens, env.safety, env.grid, env.controls, tol=1e-12)
        xibar = compute_xibar(V, env.safety, env.unsafe_sampler, 10, np.random.default_rng(k))
        exit_p = float(np.max(exact_exit_probability(ens, safe, V, xibar)))
        for beta in DEFAULT_BETA_GRID:
            # worst_risk does not depend on the threshold being tested
            cert = verify_prop1(ens, safe, V, env.safety, xibar, RiskParams(float(beta), scheme="quadrature"),
                                xi=float(np.nextafter(xibar, 0.0)))
            bound = math.exp(beta * (cert.worst_risk - xibar))
            checked += 1
            if exit_p > bound:
                violations.append((k, float(beta), exit_p, bound))
    assert checked == 20 * len(DEFAULT_BETA_GRID)
    assert violations == []


@pytest.mark.criterion(4, "tabular evaluation and safe training match linear solve / policy iteration within 1e-8")
def test_criterion_04_tabular_exactness():
    envs = [make_env("gridworld")] + [random_gridworld(10, 3, np.random.default_rng(s)) for s in range(3)]
    for env in envs:
        ens, P = ModelEnsemble.single(env.system), transition_tensor(env)
        c, gamma = env.settings["cost"], env.safety.gamma
        safe, V = train_safe(ens, env.safety, env.grid, env.controls, tol=1e-13)
        V_opt, _ = policy_iteration(P, np.repeat(c[:, None], P.shape[1], axis=1), gamma, "min")
        assert np.max(np.abs(V.table - V_opt)) <= 1e-8
        acts = _actions(safe, env.grid)
        exact = linear_solve_value(policy_matrix(P, acts), c, gamma)
        V_eval = policy_evaluation(ens, safe, env.safety, env.grid, tol=1e-13)
        assert np.max(np.abs(V_eval.table - exact)) <= 1e-8
        res = bellman_residual(ValueFunction(env.grid, exact), ens, safe, env.safety, env.grid.nodes())
        assert res.max_abs <= 1e-10


@pytest.mark.criterion(5, "lin1d quadratic-cost evaluation within 2% of the closed form on the interior 80%")
def test_criterion_05_analytic_value():
    t0 = time.perf_counter()
    env = make_env("lin1d", {"u_max": 2.0})
    ens = ModelEnsemble.single(env.system)
    gain, gamma = 1.0, env.safety.gamma
    quad = SafetySpec(env.safety.is_safe, lambda X: X[:, 0] ** 2, env.safety.c_hat, gamma)
    x_max = env.settings["x_max"]
    grid = Grid([-x_max], [x_max], [401])
    pol = LinearPolicy([[gain]], env.system.control_lo, env.system.control_hi)
    V = policy_evaluation(ens, pol, quad, grid, SamplingConfig(15, "quadrature"), tol=1e-12)
    x = np.linspace(-0.8 * x_max, 0.8 * x_max, 1001)
    closed = analytic_value_lin1d(env, gain)(x)
    a, b = env.system.params[:2]
    np.testing.assert_allclose(closed, lin1d_quadratic_value(x, a, b, gain, env.settings["sigma"], gamma),
                               rtol=1e-10)
    rel = np.abs(V.evaluate(x[:, None]) - closed) / closed
    assert rel.max() <= 0.02
    assert time.perf_counter() - t0 < 60.0


@pytest.fixture(scope="module")
def lin1d_bundle(tmp_path_factory):
    cfg = ExperimentConfig.from_dict({"env": {"name": "lin1d"}, "ensemble": {"size": 1, "seed": 0},
                                      "sweep": {"beta": [1.0], "delta_xi": [-0.1], "seeds": [0]}})
    exp = Experiment(cfg, tmp_path_factory.mktemp("lin1d"))
    exp.certify()
    return exp


@pytest.mark.criterion(6, "lin1d certificate: one-step exit rate <= delta* at 99%, 20-step stay >= (1-delta*)^20 - 3 SE")
def test_criterion_06_certificate_validity(lin1d_bundle):
    exp = lin1d_bundle
    b, cert = exp.bundle, exp.bundle.certificate
    assert cert.feasible and 0.0 < cert.delta < 1.0
    # the bound controls leaving the xibar-sublevel set from inside it
    rep = mc_delta_safety(b.ensemble, b.safe, b.V_safe, cert.xibar, exp.env.safety, 100_000,
                          np.random.default_rng(6), confidence=0.99)
    assert rep.ci_low <= cert.delta
    stay = kstep_stay_probability(b.ensemble, b.safe, b.V_safe, cert.xibar, 20, 100_000,
                                  np.random.default_rng(7), delta=cert.delta)
    assert stay.empirical >= stay.bound - 3.0 * stay.standard_error


@pytest.fixture(scope="module")
def dint_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("dint")
    t0 = time.perf_counter()
    bundle = run_algorithm1(ExperimentConfig.load(CONFIGS / "dintegrator.yaml"), out)
    return out, bundle, time.perf_counter() - t0


@pytest.mark.criterion(7, "1e4 hard-mode filtered steps on dintegrator: risk <= xi* or exact safe fallback")
def test_criterion_07_filter_feasibility(dint_run):
    out, _, _ = dint_run
    exp = Experiment(ExperimentConfig.load(CONFIGS / "dintegrator.yaml"), out)
    cert = exp.certify()
    exp.train_nominal()
    exp.train_safe()
    b = exp.bundle
    xi_star = cert.xi
    fc = exp.filter_config(cert.beta, xi_star, mode="hard")
    starts = b.V_safe.nodes()[b.V_safe.table <= xi_star]
    rng = np.random.default_rng(7)
    X = starts[rng.integers(len(starts), size=100)]
    steps = fallbacks = interventions = inside = 0
    for r, x in enumerate(X):
        pol = FilteredPolicy(b.nominal, b.safe, b.V_safe, b.ensemble, fc, seed=r)
        sys = b.true_system.members[0]
        for _ in range(100):
            in_sublevel = b.V_safe.evaluate(x[None])[0] <= xi_star
            u = pol(x)
            res = pol.last_result
            if in_sublevel:
                inside += 1
                assert res.risk_at_u <= xi_star or res.fell_back
            if res.fell_back:
                np.testing.assert_array_equal(u, sys.clip_control(b.safe(x)))
                fallbacks += 1
            if res.intervened:
                interventions += 1
            else:
                np.testing.assert_array_equal(u, sys.clip_control(b.nominal(x)))
            steps += 1
            x = step(sys, x, u, rng)
    assert steps == 10_000
    assert interventions > 0
    print(f"criterion 7: {steps} steps ({inside} inside the sublevel set), {interventions} interventions, "
          f"{fallbacks} fallbacks")


@pytest.mark.criterion(8, "dintegrator sweep: violations fall with beta, rise with delta-xi; nominal worst, earns most")
def test_criterion_08_sweep_trends(dint_run):
    out, bundle, elapsed = dint_run
    assert elapsed < 600.0 and not bundle.errors
    s = report(out / "sweep.csv", out / "report")
    print(s.text)
    tau_b, p_b = s.tau_beta
    tau_x, p_x = s.tau_delta_xi
    assert tau_b < 0 and p_b < 0.05
    assert tau_x > 0 and p_x < 0.05
    by = {(float(c.beta), float(c.delta_xi)): c for c in s.cells}
    betas = sorted({k[0] for k in by})
    dxis = sorted({k[1] for k in by})
    assert betas == [0.01, 0.05, 0.1] and len(dxis) == 5
    for d in dxis:
        v = [by[(bb, d)].violations for bb in betas]
        assert all(later <= earlier for earlier, later in zip(v, v[1:]))
    for bb in betas:
        v = [by[(bb, d)].violations for d in dxis]
        assert all(later >= earlier for earlier, later in zip(v, v[1:]))
        assert by[(bb, dxis[0])].avg_reward <= s.nominal.avg_reward
    assert all(s.nominal.violations >= c.violations for c in s.cells)
    assert {r["seed"] for r in bundle.rows} == {0, 1, 2}
    assert all(r["beta"] == NOMINAL or 0 <= r["violations"] <= 100 for r in bundle.rows)


@pytest.mark.criterion(9, "gridworld: exact expected value decrease below the linear bound at every state")
def test_criterion_09_value_decrease_exact():
    for env in [make_env("gridworld"), make_env("gridworld", {"gamma": 0.95, "slip": 0.3})]:
        ens, P = ModelEnsemble.single(env.system), transition_tensor(env)
        c, gamma = env.settings["cost"], env.safety.gamma
        safe, V = train_safe(ens, env.safety, env.grid, env.controls, tol=1e-13)
        P_pi = policy_matrix(P, _actions(safe, env.grid))
        V_exact = exact_policy_value(P_pi, c, gamma)
        g = Fraction(gamma)
        theta = fit_theta(V.table, c, gamma)
        t1 = Fraction(theta.theta1)
        c_q = [Fraction(float(ci)) for ci in c]
        # validated offset: the exact upper envelope holds with equality somewhere
        t2 = max(Fraction(0), max(v - t1 * ci for v, ci in zip(V_exact, c_q)))
        assert all(v <= t1 * ci + t2 for v, ci in zip(V_exact, c_q))
        assert ThetaConstants(float(t1), float(t2)).premise_ok(gamma)
        n = len(V_exact)
        for s in range(n):
            ev = sum(Fraction(float(P_pi[s, j])) * V_exact[j] for j in range(n))
            assert ev - V_exact[s] <= lemma3_decrease_bound(t1, t2, g, V_exact[s])


@pytest.mark.criterion(10, "threshold bound (50, 1, 1, 0; 0.99) is exactly 2.0 and the pipeline refuses c_hat <= bound")
def test_criterion_10_gate(tmp_path):
    assert c_hat_lower_bound(ThetaConstants(50.0, 1.0, 1.0, 0.0), 0.99) == 2.0
    cfg = ExperimentConfig.load(CONFIGS / "gridworld.yaml").with_changes(
        env={"name": "gridworld", "overrides": {"gamma": 0.99, "c_hat": 2.0}},
        safety={"theta": [50.0, 1.0, 1.0, 0.0]})
    with pytest.raises(StageError) as exc:
        run_algorithm1(cfg, tmp_path)
    assert exc.value.stage == "gate" and isinstance(exc.value.cause, CertificationRefused)
    assert "c_hat=2 must exceed 2" in str(exc.value)
    assert not (tmp_path / "certificate.json").exists()


@pytest.mark.criterion(11, "two full dintegrator runs with the same config and seed write byte-identical CSVs")
def test_criterion_11_determinism(dint_run, tmp_path):
    out, _, _ = dint_run
    run_algorithm1(ExperimentConfig.load(CONFIGS / "dintegrator.yaml"), tmp_path)
    assert (tmp_path / "sweep.csv").read_bytes() == (out / "sweep.csv").read_bytes()
