"""Policies and the two learning problems: the nominal (reward) and safe (cost) policy."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .dynamics import ModelEnsemble, SamplingConfig, successor_set
from .value import Grid, ValueFunction, expectation_operator, policy_evaluation

logger = logging.getLogger(__name__)

POLICY_FORMAT = "riskfilter.policy"
POLICY_VERSION = 1

# Relative gap under which two control values count as tied.
TIE_TOL = 1e-9


class Policy:
    """Maps states (d_x,) or (B, d_x) to controls inside the control box."""

    kind = "abstract"

    def __init__(self, lo, hi, metadata: dict | None = None):
        self.lo = np.array(lo, dtype=np.float64, ndmin=1)
        self.hi = np.array(hi, dtype=np.float64, ndmin=1)
        self.metadata = dict(metadata or {})

    @property
    def d_u(self) -> int:
        return self.lo.shape[0]

    def _raw(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        U = np.clip(self._raw(np.atleast_2d(x)), self.lo, self.hi)
        return U[0] if single else U

    def _arrays(self) -> dict:
        return {}

    def save(self, path) -> None:
        import json
        np.savez(path, format=POLICY_FORMAT, version=POLICY_VERSION, kind=self.kind,
                 lo=self.lo, hi=self.hi, metadata=json.dumps(self.metadata, sort_keys=True),
                 **self._arrays())


class GridPolicy(Policy):
    """Per-node controls, multilinearly interpolated between nodes."""

    kind = "grid-table"

    def __init__(self, grid: Grid, table, lo, hi, metadata: dict | None = None):
        super().__init__(lo, hi, metadata)
        self.grid = grid
        self.table = np.ascontiguousarray(np.asarray(table, dtype=np.float64).reshape(grid.size, -1))

    def _raw(self, X):
        idx, w = self.grid.stencil(X)
        return np.stack([kernels.gather_sum(np.ascontiguousarray(self.table[:, j]), idx, w)
                         for j in range(self.table.shape[1])], axis=1)

    def _arrays(self):
        return {"grid_lo": self.grid.lo, "grid_hi": self.grid.hi, "grid_shape": self.grid.shape,
                "table": self.table}


class LinearPolicy(Policy):
    """``u = offset - gain @ x``."""

    kind = "linear-gain"

    def __init__(self, gain, lo, hi, offset=None, metadata: dict | None = None):
        super().__init__(lo, hi, metadata)
        self.gain = np.atleast_2d(np.asarray(gain, dtype=np.float64))
        self.offset = np.zeros(self.d_u) if offset is None else np.asarray(offset, dtype=np.float64)

    def _raw(self, X):
        return self.offset[None, :] - X @ self.gain.T

    def _arrays(self):
        return {"gain": self.gain, "offset": self.offset}


class ConstantPolicy(Policy):
    kind = "constant"

    def __init__(self, u, lo, hi, metadata: dict | None = None):
        super().__init__(lo, hi, metadata)
        self.u = np.array(u, dtype=np.float64, ndmin=1)

    def _raw(self, X):
        return np.broadcast_to(self.u, (X.shape[0], self.u.shape[0])).copy()

    def _arrays(self):
        return {"u": self.u}


def load_policy(path) -> Policy:
    import json
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != POLICY_FORMAT or int(z["version"]) != POLICY_VERSION:
            raise ValueError(f"{path} is not a version-{POLICY_VERSION} policy file")
        kind, lo, hi = str(z["kind"]), z["lo"], z["hi"]
        meta = json.loads(str(z["metadata"]))
        if kind == GridPolicy.kind:
            return GridPolicy(Grid(z["grid_lo"], z["grid_hi"], z["grid_shape"]), z["table"], lo, hi, meta)
        if kind == LinearPolicy.kind:
            return LinearPolicy(z["gain"], lo, hi, z["offset"], meta)
        if kind == ConstantPolicy.kind:
            return ConstantPolicy(z["u"], lo, hi, meta)
    raise ValueError(f"unknown policy kind {kind!r}")


@dataclass(frozen=True, eq=False)
class RewardSpec:
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gamma: float
    name: str = ""


def control_grid(lo, hi, points: int = 21) -> np.ndarray:
    """Evenly spaced controls per axis, ordered by magnitude then lexicographically.

    The order doubles as the tie-break preference of the greedy policies.
    """
    lo = np.array(lo, dtype=np.float64, ndmin=1)
    hi = np.array(hi, dtype=np.float64, ndmin=1)
    axes = [np.linspace(l, h, points) if h > l else np.array([l]) for l, h in zip(lo, hi)]
    pts = np.array(list(itertools.product(*axes)), dtype=np.float64)
    return order_controls(pts)


def order_controls(controls) -> np.ndarray:
    U = np.atleast_2d(np.asarray(controls, dtype=np.float64))
    keys = [U[:, j] for j in range(U.shape[1] - 1, -1, -1)] + [np.round(np.linalg.norm(U, axis=1), 12)]
    return U[np.lexsort(keys)]


@dataclass
class FVIResult:
    values: np.ndarray
    q: np.ndarray
    choice: np.ndarray
    sweeps: int
    converged: bool
    controls: np.ndarray = field(repr=False, default=None)


def _select(Q: np.ndarray, sense: str) -> np.ndarray:
    best = Q.min(axis=1) if sense == "min" else Q.max(axis=1)
    tied = np.abs(Q - best[:, None]) <= TIE_TOL * np.maximum(1.0, np.abs(best))[:, None]
    return np.argmax(tied, axis=1)


def fitted_value_iteration(ens: ModelEnsemble, grid: Grid, controls: np.ndarray, stage: np.ndarray,
                           gamma: float, sense: str, sampling: SamplingConfig = SamplingConfig(),
                           tol: float = 1e-6, max_sweeps: int = 10_000) -> FVIResult:
    """Jacobi value iteration over grid nodes and a finite control set.

    ``stage`` is the (N, K) immediate reward or cost; ``sense`` is ``max``
    for rewards and ``min`` for costs.
    """
    if sense not in ("min", "max"):
        raise ValueError("sense must be 'min' or 'max'")
    X = grid.nodes()
    n, k = X.shape[0], controls.shape[0]
    U = np.broadcast_to(controls[None], (n, k, controls.shape[1]))
    nxt, w = successor_set(ens, X, U, sampling)
    s, d = nxt.shape[2], nxt.shape[3]
    idx, W = expectation_operator(grid, nxt.reshape(n * k, s, d), w.reshape(n * k, s))
    reduce = np.min if sense == "min" else np.max
    V = np.zeros(n)
    converged, sweeps = False, max_sweeps
    for sweep in range(1, max_sweeps + 1):
        Q = stage + gamma * kernels.gather_sum(V, idx, W).reshape(n, k)
        V_new = reduce(Q, axis=1)
        diff = float(np.max(np.abs(V_new - V)))
        V = V_new
        if diff <= tol:
            converged, sweeps = True, sweep
            break
    if not converged:
        logger.warning("value iteration stopped after %d sweeps without reaching tol=%g", max_sweeps, tol)
    Q = stage + gamma * kernels.gather_sum(V, idx, W).reshape(n, k)
    return FVIResult(V, Q, _select(Q, sense), sweeps, converged, controls)


def train_nominal(ens: ModelEnsemble, reward: RewardSpec, grid: Grid, controls: np.ndarray | None = None,
                  sampling: SamplingConfig = SamplingConfig(), tol: float = 1e-6,
                  max_sweeps: int = 10_000) -> GridPolicy:
    """Greedy policy of the discounted-reward fixed point over the ensemble."""
    sys = ens.template
    controls = control_grid(sys.control_lo, sys.control_hi) if controls is None else order_controls(controls)
    X = grid.nodes()
    n, k = X.shape[0], controls.shape[0]
    Xr = np.repeat(X, k, axis=0)
    Ur = np.tile(controls, (n, 1))
    stage = np.asarray(reward.reward(Xr, Ur), dtype=np.float64).reshape(n, k)
    res = fitted_value_iteration(ens, grid, controls, stage, reward.gamma, "max", sampling, tol, max_sweeps)
    meta = {"role": "nominal", "converged": res.converged, "sweeps": res.sweeps,
            "objective": float(res.values.mean())}
    pol = GridPolicy(grid, controls[res.choice], sys.control_lo, sys.control_hi, meta)
    pol.values = res.values
    return pol


def train_safe(ens: ModelEnsemble, spec, grid: Grid, controls: np.ndarray | None = None,
               sampling: SamplingConfig = SamplingConfig(), tol: float = 1e-6,
               max_sweeps: int = 10_000) -> tuple[GridPolicy, ValueFunction]:
    """Safe backup policy minimising the discounted safety cost, with its value.

    Pointwise minimisation at every node also minimises the node-average of V,
    so the greedy policy solves the averaged problem as well.
    """
    sys = ens.template
    controls = control_grid(sys.control_lo, sys.control_hi) if controls is None else order_controls(controls)
    X = grid.nodes()
    c = np.asarray(spec.cost(X), dtype=np.float64)
    stage = np.repeat(c[:, None], controls.shape[0], axis=1)
    res = fitted_value_iteration(ens, grid, controls, stage, spec.gamma, "min", sampling, tol, max_sweeps)
    meta = {"role": "safe", "converged": res.converged, "sweeps": res.sweeps}
    pol = GridPolicy(grid, controls[res.choice], sys.control_lo, sys.control_hi, meta)
    V = policy_evaluation(ens, pol, spec, grid, sampling, tol, max_sweeps,
                          metadata={"policy": "safe", "objective": float(res.values.mean())})
    pol.metadata["objective"] = float(V.table.mean())
    return pol, V


def batch_rollout(ens: ModelEnsemble, policy: Callable, X0: np.ndarray, horizon: int,
                  rng: np.random.Generator, reward: Callable | None = None):
    """Vectorised rollouts; each row draws its own member once.

    Returns states (n, horizon + 1, d_x), controls (n, horizon, d_u) and
    rewards (n, horizon) (zeros without a reward function).
    """
    sys = ens.template
    X = np.atleast_2d(np.asarray(X0, dtype=np.float64)).copy()
    n = X.shape[0]
    members = (np.zeros(n, dtype=np.int64) if len(ens) == 1
               else rng.choice(len(ens), size=n, p=ens.member_weights))
    states = np.empty((n, horizon + 1, sys.d_x))
    controls = np.empty((n, horizon, sys.d_u))
    rewards = np.zeros((n, horizon))
    states[:, 0] = X
    for t in range(horizon):
        U = sys.clip_control(np.asarray(policy(X), dtype=np.float64).reshape(n, sys.d_u))
        if reward is not None:
            rewards[:, t] = np.asarray(reward(X, U), dtype=np.float64)
        X = ens.transition_rows(sys.clamp_marginal(X), U, members, ens.noise.base((n,), rng))
        controls[:, t] = U
        states[:, t + 1] = X
    return states, controls, rewards


def expected_reward(ens: ModelEnsemble, policy: Callable, reward: RewardSpec,
                    x0_sampler: Callable[[int, np.random.Generator], np.ndarray], horizon: int, n: int,
                    rng: np.random.Generator, discounted: bool = True) -> float:
    """Mean (discounted) cumulative reward over ``n`` rollouts."""
    if n < 1:
        raise ValueError("n must be >= 1")
    X0 = np.atleast_2d(np.asarray(x0_sampler(n, rng), dtype=np.float64))
    _, _, r = batch_rollout(ens, policy, X0, horizon, rng, reward.reward)
    disc = reward.gamma ** np.arange(horizon) if discounted else np.ones(horizon)
    return float((r @ disc).mean())
