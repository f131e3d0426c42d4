"""Stochastic discrete-time systems, model ensembles and rollouts."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InvalidOverride, NonFiniteTransition
from .families import get_family

ENSEMBLE_FORMAT = "riskfilter.ensemble"
ENSEMBLE_VERSION = 1

# States this far outside the box are pulled back onto it before a step.
MARGINAL_TOL = 1e-9

NOISE_KINDS = ("gaussian-diagonal", "uniform-box", "degenerate")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, ndmin=1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Zero-mean additive noise.

    ``scale`` is per noise coordinate. ``state_gain`` lets the scale grow with
    the state norm: ``scale * (1 + state_gain * |x|)``. Gaussian noise uses the
    scale as standard deviation; uniform noise is supported on
    ``[-scale, scale]``.
    """

    kind: str
    scale: np.ndarray
    state_gain: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise InvalidOverride(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        scale = _frozen(self.scale)
        if np.any(scale < 0) or not np.all(np.isfinite(scale)):
            raise InvalidOverride("noise scales must be finite and non-negative")
        if self.state_gain < 0:
            raise InvalidOverride("state_gain must be non-negative")
        object.__setattr__(self, "scale", scale)

    @property
    def dim(self) -> int:
        return self.scale.shape[0]

    def base(self, size: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        """Unscaled variates of shape ``size + (dim,)``."""
        shape = tuple(size) + (self.dim,)
        if self.kind == "gaussian-diagonal":
            return rng.standard_normal(shape)
        if self.kind == "uniform-box":
            return rng.uniform(-1.0, 1.0, shape)
        return np.zeros(shape)

    def scale_at(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.state_gain == 0.0:
            return np.broadcast_to(self.scale, (x.shape[0], self.dim))
        norm = np.linalg.norm(x, axis=1, keepdims=True)
        return self.scale[None, :] * (1.0 + self.state_gain * norm)

    def quadrature(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Tensor-product quadrature of the base law: nodes (S, dim), weights (S,)."""
        if self.kind == "degenerate" or np.all(self.scale == 0.0):
            return np.zeros((1, self.dim)), np.ones(1)
        if self.kind == "gaussian-diagonal":
            z, w = np.polynomial.hermite_e.hermegauss(n)
            w = w / math.sqrt(2.0 * math.pi)
        else:
            z, w = np.polynomial.legendre.leggauss(n)
            w = w / 2.0
        grids = np.meshgrid(*([z] * self.dim), indexing="ij")
        wgrids = np.meshgrid(*([w] * self.dim), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        return nodes, weights

    def to_dict(self) -> dict:
        return {"kind": self.kind, "scale": self.scale.tolist(), "state_gain": self.state_gain}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(d["kind"], d["scale"], float(d.get("state_gain", 0.0)))


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """One transition function ``x+ = f(x, u, w)`` with its parameters."""

    name: str
    family: str
    params: np.ndarray
    noise: NoiseSpec
    state_lo: np.ndarray
    state_hi: np.ndarray
    control_lo: np.ndarray
    control_hi: np.ndarray

    def __post_init__(self):
        get_family(self.family)
        for attr in ("params", "state_lo", "state_hi", "control_lo", "control_hi"):
            object.__setattr__(self, attr, _frozen(getattr(self, attr)))
        if self.state_lo.shape != self.state_hi.shape or np.any(self.state_lo >= self.state_hi):
            raise InvalidOverride("state box must satisfy lo < hi per coordinate")
        if self.control_lo.shape != self.control_hi.shape or np.any(self.control_lo > self.control_hi):
            raise InvalidOverride("control box must satisfy lo <= hi per coordinate")

    @property
    def d_x(self) -> int:
        return self.state_lo.shape[0]

    @property
    def d_u(self) -> int:
        return self.control_lo.shape[0]

    @property
    def d_w(self) -> int:
        return self.noise.dim

    def with_params(self, params) -> "SystemSpec":
        return SystemSpec(self.name, self.family, params, self.noise, self.state_lo,
                          self.state_hi, self.control_lo, self.control_hi)

    def transition(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Batched ``f(x, u, w)`` with noise already scaled."""
        return get_family(self.family).transition(self.params, x, u, w)

    def clamp_marginal(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.state_lo, self.state_hi
        below = (x < lo) & (x >= lo - MARGINAL_TOL)
        above = (x > hi) & (x <= hi + MARGINAL_TOL)
        return np.where(below, lo, np.where(above, hi, x))

    def clip_control(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.control_lo, self.control_hi)


def step(sys: SystemSpec, x, u, rng: np.random.Generator) -> np.ndarray:
    """One transition of ``sys`` from a single state."""
    x = sys.clamp_marginal(np.asarray(x, dtype=np.float64).reshape(1, sys.d_x))
    u = sys.clip_control(np.asarray(u, dtype=np.float64).reshape(1, sys.d_u))
    w = sys.noise.base((1,), rng) * sys.noise.scale_at(x)
    out = sys.transition(x, u, w)
    if not np.all(np.isfinite(out)):
        raise NonFiniteTransition(f"non-finite successor from {sys.name} at x={x[0]}, u={u[0]}")
    return out[0]


@dataclass(frozen=True, eq=False)
class ModelEnsemble:
    """A finite distribution over transition functions."""

    members: tuple[SystemSpec, ...]
    member_weights: np.ndarray | None = None
    source_seed: int = 0

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise InvalidOverride("an ensemble needs at least one member")
        ref = members[0]
        for m in members[1:]:
            if (m.family != ref.family or m.d_x != ref.d_x or m.d_u != ref.d_u
                    or m.noise.to_dict() != ref.noise.to_dict()
                    or not np.array_equal(m.state_lo, ref.state_lo)
                    or not np.array_equal(m.state_hi, ref.state_hi)
                    or not np.array_equal(m.control_lo, ref.control_lo)
                    or not np.array_equal(m.control_hi, ref.control_hi)):
                raise InvalidOverride("ensemble members must share family, noise and boxes")
        if self.member_weights is None:
            weights = np.full(len(members), 1.0 / len(members))
        else:
            weights = np.asarray(self.member_weights, dtype=np.float64)
        if weights.shape != (len(members),) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidOverride("member weights must be non-negative and sum to 1")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "member_weights", _frozen(weights))

    def __len__(self) -> int:
        return len(self.members)

    @property
    def template(self) -> SystemSpec:
        return self.members[0]

    @property
    def noise(self) -> NoiseSpec:
        return self.template.noise

    @property
    def has_exact(self) -> bool:
        return get_family(self.template.family).exact is not None

    @classmethod
    def single(cls, sys: SystemSpec, source_seed: int = 0) -> "ModelEnsemble":
        return cls((sys,), None, source_seed)

    def transition_rows(self, x, u, member_idx, base) -> np.ndarray:
        """Row-wise successors: row r uses member ``member_idx[r]`` and base noise ``base[r]``."""
        out = np.empty_like(x, dtype=np.float64)
        for j in np.unique(member_idx):
            rows = member_idx == j
            sys = self.members[j]
            xr = x[rows]
            w = base[rows] * sys.noise.scale_at(xr)
            nxt = sys.transition(xr, u[rows], w)
            if not np.all(np.isfinite(nxt)):
                raise NonFiniteTransition(f"non-finite successor from member {j}", member_index=int(j))
            out[rows] = nxt
        return out


def sample_member_index(ens: ModelEnsemble, rng: np.random.Generator) -> int:
    if len(ens) == 1:
        return 0
    return int(rng.choice(len(ens), p=ens.member_weights))


def sample_member(ens: ModelEnsemble, rng: np.random.Generator) -> SystemSpec:
    return ens.members[sample_member_index(ens, rng)]


@dataclass(frozen=True)
class Draws:
    """Reusable (member, base-noise) tuples for common random numbers."""

    members: np.ndarray
    base: np.ndarray

    def __len__(self) -> int:
        return self.members.shape[0]


def draw(ens: ModelEnsemble, m: int, rng: np.random.Generator) -> Draws:
    if m < 1:
        raise ValueError("need at least one draw")
    if len(ens) == 1:
        members = np.zeros(m, dtype=np.int64)
    else:
        members = rng.choice(len(ens), size=m, p=ens.member_weights)
    return Draws(members.astype(np.int64), ens.noise.base((m,), rng))


def apply_draws(ens: ModelEnsemble, x, u, draws: Draws) -> np.ndarray:
    """Successors of one state under each control row in ``u`` (K, d_u) -> (K, m, d_x)."""
    sys = ens.template
    x = sys.clamp_marginal(np.asarray(x, dtype=np.float64).reshape(sys.d_x))
    u = sys.clip_control(np.asarray(u, dtype=np.float64).reshape(-1, sys.d_u))
    k, m = u.shape[0], len(draws)
    xs = np.broadcast_to(x, (k * m, sys.d_x))
    us = np.repeat(u, m, axis=0)
    members = np.tile(draws.members, k)
    base = np.tile(draws.base, (k, 1))
    return ens.transition_rows(xs, us, members, base).reshape(k, m, sys.d_x)


def sample_next_states(ens: ModelEnsemble, x, u, m: int, rng: np.random.Generator,
                       common: bool = False) -> np.ndarray:
    """``m`` successor draws of ``x`` under control ``u``.

    ``u`` may be one control (returns (m, d_x)) or a stack of K controls
    (returns (K, m, d_x)). With ``common=True`` the same (member, noise)
    tuples are used for every control, so the output is a pure function of
    ``u`` for a fixed generator state.
    """
    u_arr = np.asarray(u, dtype=np.float64)
    single = u_arr.ndim <= 1
    u2 = u_arr.reshape(-1, ens.template.d_u)
    if common or u2.shape[0] == 1:
        out = apply_draws(ens, x, u2, draw(ens, m, rng))
    else:
        out = np.concatenate([apply_draws(ens, x, row[None], draw(ens, m, rng)) for row in u2])
    return out[0] if single else out


@dataclass(frozen=True)
class SamplingConfig:
    """How expectations over (model, noise) are approximated on a grid.

    Every ensemble member is always visited with its weight. ``scheme`` picks
    the noise nodes: ``quadrature`` (Gauss-Hermite / Gauss-Legendre, or the
    exact successor list for finite families) or ``mc`` (``noise_samples``
    random draws per node and member, shared across controls).
    """

    noise_samples: int = 7
    scheme: str = "quadrature"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("quadrature", "mc"):
            raise ValueError(f"unknown sampling scheme {self.scheme!r}")
        if self.noise_samples < 1:
            raise ValueError("noise_samples must be >= 1")


def successor_set(ens: ModelEnsemble, X: np.ndarray, U: np.ndarray,
                  sampling: SamplingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Successors of every (node, control) pair with expectation weights.

    ``X`` is (N, d_x) and ``U`` is (N, K, d_u). Returns successors
    (N, K, S, d_x) and weights (N, K, S) summing to one over S.
    """
    from .rng import substream

    sys = ens.template
    X = np.asarray(X, dtype=np.float64)
    U = sys.clip_control(np.asarray(U, dtype=np.float64))
    n, k = U.shape[0], U.shape[1]
    xs = np.repeat(X, k, axis=0)
    us = U.reshape(n * k, sys.d_u)

    if sampling.scheme == "quadrature" and ens.has_exact:
        exact = get_family(sys.family).exact
        blocks, wblocks = [], []
        for j, member in enumerate(ens.members):
            succ, prob = exact(member.params, xs, us)
            blocks.append(succ)
            wblocks.append(prob * ens.member_weights[j])
        nxt = np.concatenate(blocks, axis=1)
        wts = np.concatenate(wblocks, axis=1)
        s = nxt.shape[1]
        return nxt.reshape(n, k, s, sys.d_x), wts.reshape(n, k, s)

    if sampling.scheme == "quadrature":
        nodes, qw = ens.noise.quadrature(sampling.noise_samples)
        q = nodes.shape[0]
        base = np.broadcast_to(nodes[None, None], (n, len(ens), q, sys.d_w))
        w_member = ens.member_weights[:, None] * qw[None, :]
    else:
        rng = substream(sampling.seed, "successor-set")
        q = sampling.noise_samples
        base = ens.noise.base((n, len(ens), q), rng)
        w_member = np.broadcast_to(ens.member_weights[:, None] / q, (len(ens), q))
    s = len(ens) * q
    # noise is drawn per node and shared across the K controls
    base_rows = np.broadcast_to(base.reshape(n, 1, s, sys.d_w), (n, k, s, sys.d_w)).reshape(-1, sys.d_w)
    members = np.tile(np.repeat(np.arange(len(ens)), q), n * k)
    x_rows = np.repeat(xs, s, axis=0)
    u_rows = np.repeat(us, s, axis=0)
    nxt = ens.transition_rows(x_rows, u_rows, members, base_rows)
    wts = np.broadcast_to(w_member.reshape(1, 1, s), (n, k, s))
    return nxt.reshape(n, k, s, sys.d_x), np.ascontiguousarray(wts)


@dataclass
class RolloutRecord:
    states: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    rewards: np.ndarray
    violation_steps: list[int]
    member_index: int
    seed: int | None = None
    truncated: bool = False
    info: list[dict] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def violations(self) -> int:
        return len(self.violation_steps)


def rollout(ens: ModelEnsemble, policy: Callable, x0, horizon: int, safety,
            rng: np.random.Generator, reward: Callable | None = None,
            seed: int | None = None) -> RolloutRecord:
    """Sample one member and run ``policy`` on it for ``horizon`` steps.

    Costs and the safety test are recorded for every visited state, rewards
    for every applied control.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    j = sample_member_index(ens, rng)
    sys = ens.members[j]
    x = np.asarray(x0, dtype=np.float64).reshape(sys.d_x)
    states, controls, rewards, info = [x], [], [], []
    truncated = False
    for _ in range(horizon):
        u = sys.clip_control(np.asarray(policy(x), dtype=np.float64).reshape(sys.d_u))
        if hasattr(policy, "last_info"):
            info.append(policy.last_info)
        if reward is not None:
            rewards.append(float(np.asarray(reward(x[None], u[None])).reshape(-1)[0]))
        try:
            x = step(sys, x, u, rng)
        except NonFiniteTransition:
            truncated = True
            break
        controls.append(u)
        states.append(x)
    S = np.array(states)
    if truncated and rewards:
        rewards = rewards[: len(controls)]
    costs = np.asarray(safety.cost(S), dtype=np.float64)
    safe = np.asarray(safety.is_safe(S), dtype=bool)
    return RolloutRecord(
        states=S,
        controls=np.array(controls).reshape(len(controls), sys.d_u),
        costs=costs,
        rewards=np.array(rewards, dtype=np.float64),
        violation_steps=[int(i) for i in np.flatnonzero(~safe)],
        member_index=j,
        seed=seed,
        truncated=truncated,
        info=info,
    )


def ensemble_to_dict(ens: ModelEnsemble) -> dict:
    t = ens.template
    return {
        "format": ENSEMBLE_FORMAT,
        "version": ENSEMBLE_VERSION,
        "name": t.name,
        "family": t.family,
        "params": [m.params.tolist() for m in ens.members],
        "weights": ens.member_weights.tolist(),
        "source_seed": int(ens.source_seed),
        "noise": t.noise.to_dict(),
        "state_box": [t.state_lo.tolist(), t.state_hi.tolist()],
        "control_box": [t.control_lo.tolist(), t.control_hi.tolist()],
    }


def ensemble_from_dict(d: dict) -> ModelEnsemble:
    if d.get("format") != ENSEMBLE_FORMAT:
        raise ValueError("not an ensemble file")
    if d.get("version") != ENSEMBLE_VERSION:
        raise ValueError(f"unsupported ensemble version {d.get('version')}")
    noise = NoiseSpec.from_dict(d["noise"])
    members = tuple(
        SystemSpec(d["name"], d["family"], p, noise, d["state_box"][0], d["state_box"][1],
                   d["control_box"][0], d["control_box"][1])
        for p in d["params"]
    )
    return ModelEnsemble(members, np.asarray(d["weights"]), int(d["source_seed"]))


def save_ensemble(ens: ModelEnsemble, path) -> None:
    Path(path).write_text(json.dumps(ensemble_to_dict(ens), indent=2))


def load_ensemble(path) -> ModelEnsemble:
    return ensemble_from_dict(json.loads(Path(path).read_text()))
