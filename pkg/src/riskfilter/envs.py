"""Benchmark environments with known structure.

``lin1d``        scalar linear-Gaussian system, closed-form values for quadratic cost
``dintegrator``  double integrator with an uncertain mass and a velocity cap
``gridworld``    finite MDP with an explicit transition tensor
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import ModelEnsemble, NoiseSpec, SystemSpec
from .errors import InvalidOverride, UnknownEnv, UnstableClosedLoop
from .families import mdp_params, mdp_tensor
from .policy import RewardSpec
from .rng import substream
from .safety import SafetySpec, validate_cost_threshold
from .value import Grid

ENV_NAMES = ("lin1d", "dintegrator", "gridworld")

# unsafe states drawn when an environment validates its cost threshold
VALIDATION_SAMPLES = 10_000


@dataclass(eq=False)
class EnvDescriptor:
    name: str
    system: SystemSpec
    safety: SafetySpec
    reward: RewardSpec
    grid: Grid
    x0: np.ndarray
    constrained_index: int
    param_sampler: Callable[[np.random.Generator], np.ndarray] | None = None
    controls: np.ndarray | None = None
    unsafe_sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None
    settings: dict = field(default_factory=dict)

    def make_ensemble(self, size: int, seed: int) -> tuple[ModelEnsemble, SystemSpec]:
        """Training ensemble of ``size`` draws plus one held-out draw for the true system."""
        if size < 1:
            raise InvalidOverride("ensemble size must be >= 1")
        rng = substream(seed, "ensemble", 0)
        draws = []
        for _ in range(size + 1):
            params = self.system.params if self.param_sampler is None else self.param_sampler(rng)
            draws.append(self.system.with_params(params))
        return ModelEnsemble(tuple(draws[:size]), None, int(seed)), draws[size]


def _take(overrides: dict, defaults: dict, env: str) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise InvalidOverride(f"unknown overrides for {env}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(overrides)
    return merged


def _box_unsafe_sampler(lo, hi, is_safe):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)

    def sample(n, rng):
        out, have = [], 0
        for _ in range(200):
            X = rng.uniform(lo, hi, size=(max(n, 64), lo.shape[0]))
            X = X[~np.asarray(is_safe(X), dtype=bool)]
            out.append(X)
            have += X.shape[0]
            if have >= n:
                break
        return np.concatenate(out)[:n] if out else np.empty((0, lo.shape[0]))

    return sample


LIN1D_DEFAULTS = dict(a=1.0, b=0.5, sigma=0.05, param_std=0.0, u_max=1.0, x_max=2.0, safe_bound=1.0,
                      cost_offset=0.5, c_hat=None, gamma=0.9, grid_points=81)


def _lin1d(ov: dict) -> EnvDescriptor:
    s = _take(ov, LIN1D_DEFAULTS, "lin1d")
    if s["sigma"] < 0 or s["param_std"] < 0:
        raise InvalidOverride("sigma and param_std must be non-negative")
    if not 0 < s["cost_offset"] < s["safe_bound"] < s["x_max"]:
        raise InvalidOverride("need 0 < cost_offset < safe_bound < x_max")
    kind = "gaussian-diagonal" if s["sigma"] > 0 else "degenerate"
    noise = NoiseSpec(kind, [s["sigma"]])
    sys = SystemSpec("lin1d", "linear", [s["a"], s["b"]], noise, [-s["x_max"]], [s["x_max"]],
                     [-s["u_max"]], [s["u_max"]])
    bound, off = s["safe_bound"], s["cost_offset"]
    c_hat = bound - off if s["c_hat"] is None else s["c_hat"]
    safety = SafetySpec(lambda X: np.abs(X[:, 0]) <= bound,
                        lambda X: np.maximum(0.0, np.abs(X[:, 0]) - off),
                        c_hat, s["gamma"], "lin1d-hinge")
    x_max = s["x_max"]
    reward = RewardSpec(lambda X, U: X[:, 0] + x_max, s["gamma"], "lin1d-position")
    sampler = None
    if s["param_std"] > 0:
        a, b, sd = s["a"], s["b"], s["param_std"]
        sampler = lambda rng: np.array([a + sd * rng.standard_normal(), b])  # noqa: E731
    return EnvDescriptor("lin1d", sys, safety, reward, Grid([-x_max], [x_max], [s["grid_points"]]),
                         np.zeros(1), 0, sampler, None,
                         _box_unsafe_sampler(sys.state_lo, sys.state_hi, safety.is_safe), s)


DINTEGRATOR_DEFAULTS = dict(mass=1.0, mass_std=0.1, mass_range=(0.5, 1.5), tau=0.1, noise_std=0.2,
                            v_crit=2.0, v_min=-10.0, v_max=10.0, effort=0.1, gamma=0.99, u_max=1.0,
                            p_max=20.0, c_hat=None, grid_shape=(2, 201))


def _dintegrator(ov: dict) -> EnvDescriptor:
    s = _take(ov, DINTEGRATOR_DEFAULTS, "dintegrator")
    lo_m, hi_m = s["mass_range"]
    if s["mass"] <= 0 or lo_m <= 0 or not lo_m <= s["mass"] <= hi_m:
        raise InvalidOverride("masses must be positive and the nominal mass inside mass_range")
    if s["mass_std"] < 0 or s["noise_std"] < 0 or s["tau"] <= 0:
        raise InvalidOverride("mass_std and noise_std must be non-negative, tau positive")
    if not s["v_min"] < s["v_crit"] < s["v_max"]:
        raise InvalidOverride("need v_min < v_crit < v_max")
    kind = "gaussian-diagonal" if s["noise_std"] > 0 else "degenerate"
    noise = NoiseSpec(kind, [s["noise_std"]])
    params = [s["mass"], s["tau"], s["v_min"], s["v_max"]]
    sys = SystemSpec("dintegrator", "double_integrator", params, noise,
                     [-s["p_max"], s["v_min"]], [s["p_max"], s["v_max"]], [-s["u_max"]], [s["u_max"]])
    v_crit, v_min, effort = s["v_crit"], s["v_min"], s["effort"]
    c_hat = v_crit - v_min if s["c_hat"] is None else s["c_hat"]
    safety = SafetySpec(lambda X: X[:, 1] <= v_crit,
                        lambda X: np.maximum(0.0, X[:, 1] - v_min),
                        c_hat, s["gamma"], "velocity-cap")
    reward = RewardSpec(lambda X, U: X[:, 1] - effort * U[:, 0] ** 2, s["gamma"], "velocity-minus-effort")
    mean, sd = s["mass"], s["mass_std"]

    def masses(rng):
        # truncated normal by rejection
        while True:
            m = mean + sd * rng.standard_normal()
            if lo_m <= m <= hi_m:
                return np.array([m, s["tau"], v_min, s["v_max"]])

    grid = Grid(sys.state_lo, sys.state_hi, list(s["grid_shape"]))
    return EnvDescriptor("dintegrator", sys, safety, reward, grid, np.zeros(2), 1,
                         masses if sd > 0 else None, None,
                         _box_unsafe_sampler(sys.state_lo, sys.state_hi, safety.is_safe), s)


GRIDWORLD_DEFAULTS = dict(n=10, m=2, P=None, unsafe=None, cost=None, reward=None, c_hat=None,
                          gamma=0.9, slip=0.1)


def chain_tensor(n: int, slip: float) -> np.ndarray:
    """Two-action chain: action 0 moves left, 1 moves right, slipping the other way."""
    P = np.zeros((n, 2, n))
    for s in range(n):
        left, right = max(s - 1, 0), min(s + 1, n - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    return P


def _gridworld(ov: dict) -> EnvDescriptor:
    s = _take(ov, GRIDWORLD_DEFAULTS, "gridworld")
    if s["P"] is None:
        if s["m"] != 2:
            raise InvalidOverride("the default chain tensor has two actions; pass P for other m")
        P = chain_tensor(int(s["n"]), float(s["slip"]))
    else:
        P = np.asarray(s["P"], dtype=np.float64)
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise InvalidOverride(f"P must have shape (n, m, n), got {P.shape}")
    n, m = P.shape[0], P.shape[1]
    if ov.get("n", n) != n or ov.get("m", m) != m:
        raise InvalidOverride("n and m disagree with the shape of P")
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > 1e-12:
        raise InvalidOverride("transition rows must be non-negative and sum to 1 within 1e-12")
    unsafe = np.array(sorted({n - 1} if s["unsafe"] is None else set(int(i) for i in s["unsafe"])),
                      dtype=np.int64)
    if unsafe.size == 0 or unsafe.min() < 0 or unsafe.max() >= n:
        raise InvalidOverride("unsafe states must be a non-empty subset of range(n)")
    if s["cost"] is None:
        cost = np.maximum(0.0, np.arange(n) - (n - 4.0))
    else:
        cost = np.asarray(s["cost"], dtype=np.float64)
    if cost.shape != (n,) or np.any(cost < 0):
        raise InvalidOverride("cost must be a non-negative vector of length n")
    if s["reward"] is None:
        reward_tab = np.repeat((np.arange(n) / max(n - 1, 1))[:, None], m, axis=1)
    else:
        reward_tab = np.asarray(s["reward"], dtype=np.float64)
    if reward_tab.shape != (n, m):
        raise InvalidOverride("reward must have shape (n, m)")
    c_hat = float(cost[unsafe].min()) if s["c_hat"] is None else float(s["c_hat"])
    unsafe_mask = np.zeros(n, dtype=bool)
    unsafe_mask[unsafe] = True

    def idx(X):
        return np.clip(np.rint(X[:, 0]), 0, n - 1).astype(np.int64)

    noise = NoiseSpec("uniform-box", [0.5])
    sys = SystemSpec("gridworld", "finite_mdp", mdp_params(P), noise, [0.0], [n - 1.0], [0.0], [m - 1.0])
    safety = SafetySpec(lambda X: ~unsafe_mask[idx(X)], lambda X: cost[idx(X)], c_hat, s["gamma"],
                        "gridworld-cost")
    reward = RewardSpec(lambda X, U: reward_tab[idx(X), np.clip(np.rint(U[:, 0]), 0, m - 1).astype(np.int64)],
                        s["gamma"], "gridworld-reward")
    unsafe_states = unsafe.astype(np.float64)[:, None]
    settings = dict(s, P=P, unsafe=unsafe.tolist(), cost=cost, reward=reward_tab, n=n, m=m)
    return EnvDescriptor("gridworld", sys, safety, reward, Grid([0.0], [n - 1.0], [n]), np.zeros(1), 0,
                         None, np.arange(m, dtype=np.float64)[:, None],
                         lambda k, rng: unsafe_states.copy(), settings)


_BUILDERS = {"lin1d": _lin1d, "dintegrator": _dintegrator, "gridworld": _gridworld}


def make_env(name: str, overrides: dict | None = None, validate: bool = True) -> EnvDescriptor:
    """Build a fully populated environment and check its cost threshold on unsafe samples."""
    if name not in _BUILDERS:
        raise UnknownEnv(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    env = _BUILDERS[name](dict(overrides or {}))
    if validate:
        rep = validate_cost_threshold(env.safety, env.unsafe_sampler, VALIDATION_SAMPLES,
                                      substream(0, "validate-env"))
        if not rep.ok:
            raise InvalidOverride(
                f"{name}: cost {rep.min_unsafe_cost:.6g} at unsafe state {rep.witness} "
                f"is below c_hat={env.safety.c_hat}")
    return env


def transition_tensor(env: EnvDescriptor) -> np.ndarray:
    if env.system.family != "finite_mdp":
        raise InvalidOverride(f"{env.name} is not a finite MDP")
    return mdp_tensor(env.system.params)


def random_gridworld(n: int, m: int, rng: np.random.Generator, n_unsafe: int = 2,
                     gamma: float = 0.9, sparsity: float = 0.5) -> EnvDescriptor:
    """Random finite MDP with a hinge-like cost that meets its threshold on unsafe states."""
    P = np.zeros((n, m, n))
    for s in range(n):
        for a in range(m):
            support = rng.random(n) > sparsity
            support[rng.integers(n)] = True
            w = rng.dirichlet(np.ones(int(support.sum())))
            P[s, a, support] = w
    P /= P.sum(axis=2, keepdims=True)
    # renormalisation can leave rows off by an ulp; push the residue into the largest entry
    resid = 1.0 - P.sum(axis=2)
    big = P.argmax(axis=2)
    for s in range(n):
        for a in range(m):
            P[s, a, big[s, a]] += resid[s, a]
    unsafe = rng.choice(n, size=n_unsafe, replace=False)
    c_hat = 1.0
    cost = rng.uniform(0.0, 0.5, size=n)
    cost[unsafe] = c_hat + rng.uniform(0.0, 1.0, size=n_unsafe)
    reward = rng.uniform(0.0, 1.0, size=(n, m))
    return make_env("gridworld", dict(n=n, m=m, P=P, unsafe=unsafe.tolist(), cost=cost,
                                      reward=reward, c_hat=c_hat, gamma=gamma))


def analytic_value_lin1d(env: EnvDescriptor, gain: float, gamma: float | None = None) -> Callable:
    """Closed-form value of ``u = -gain x`` on lin1d under the quadratic cost ``x**2``.

    With ``q = a - b gain``: ``V(x) = x^2 / (1 - g q^2) + g s^2 / ((1 - g)(1 - g q^2))``.
    The control box is ignored, so callers keep ``|gain x|`` inside it.
    """
    if env.name != "lin1d":
        raise InvalidOverride("the analytic value is only defined for lin1d")
    a, b = env.system.params[:2]
    sigma = float(env.system.noise.scale[0]) if env.system.noise.kind != "degenerate" else 0.0
    g = env.safety.gamma if gamma is None else gamma
    q = a - b * gain
    if abs(q) >= 1.0:
        raise UnstableClosedLoop(f"closed-loop factor |a - b k| = {abs(q):.6g} >= 1")
    denom = 1.0 - g * q * q
    const = g * sigma ** 2 / ((1.0 - g) * denom)

    def V(x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, 0]
        return x * x / denom + const

    return V
