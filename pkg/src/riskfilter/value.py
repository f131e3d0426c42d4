"""Grid value functions: interpolation, fitted policy evaluation, sublevel sets."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .dynamics import ModelEnsemble, SamplingConfig, successor_set
from .errors import (EmptySublevelSet, NoConvergence, NonPositiveXibar, NoUnsafeStates,
                     OutOfDomain)

logger = logging.getLogger(__name__)

VALUE_FORMAT = "riskfilter.value"
VALUE_VERSION = 1


@dataclass(frozen=True, eq=False)
class Grid:
    """Regular tensor grid over a box; nodes are enumerated in C order."""

    lo: np.ndarray
    hi: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64, ndmin=1)
        hi = np.array(self.hi, dtype=np.float64, ndmin=1)
        shape = np.array(self.shape, dtype=np.int64, ndmin=1)
        if not (lo.shape == hi.shape == shape.shape):
            raise ValueError("grid lo, hi and shape must have equal length")
        if np.any(hi <= lo) or np.any(shape < 2):
            raise ValueError("grid needs lo < hi and at least two nodes per axis")
        for a in (lo, hi, shape):
            a.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "shape", shape)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (self.shape - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, n) for l, h, n in zip(self.lo, self.hi, self.shape)]

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def contains(self, X: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= self.lo - tol) & (X <= self.hi + tol), axis=1)

    def clamp(self, X: np.ndarray) -> np.ndarray:
        return np.clip(X, self.lo, self.hi)

    def stencil(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.ascontiguousarray(self.clamp(np.atleast_2d(np.asarray(X, dtype=np.float64))))
        return kernels.interp_stencil(X, self.lo, self.hi, self.shape)

    def refine(self) -> "Grid":
        """Same box with every cell halved."""
        return Grid(self.lo, self.hi, 2 * self.shape - 1)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "shape": self.shape.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(d["lo"], d["hi"], d["shape"])


@dataclass(eq=False)
class ValueFunction:
    grid: Grid
    table: np.ndarray
    out_of_box: str = "clamp"
    metadata: dict = field(default_factory=dict)
    converged: bool = True
    sweeps: int = 0

    def __post_init__(self):
        self.table = np.ascontiguousarray(self.table, dtype=np.float64).reshape(-1)
        if self.table.shape[0] != self.grid.size:
            raise ValueError(f"table has {self.table.shape[0]} entries, grid has {self.grid.size}")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("value table must be finite")
        if np.any(self.table < 0.0):
            raise ValueError("value table must be non-negative")
        if self.out_of_box not in ("clamp", "error"):
            raise ValueError("out_of_box must be 'clamp' or 'error'")

    def evaluate(self, x) -> np.ndarray | float:
        """Multilinear interpolation; a single state returns a float."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x.reshape(-1, self.grid.dim)
        if self.out_of_box == "error":
            inside = self.grid.contains(X)
            if not np.all(inside):
                bad = X[np.flatnonzero(~inside)[0]]
                raise OutOfDomain(f"state {bad} outside value domain [{self.grid.lo}, {self.grid.hi}]")
        idx, w = self.grid.stencil(X)
        out = kernels.gather_sum(self.table, idx, w)
        return float(out[0]) if single else out

    __call__ = evaluate

    def nodes(self) -> np.ndarray:
        return self.grid.nodes()

    def save(self, path) -> None:
        np.savez(
            path,
            format=VALUE_FORMAT,
            version=VALUE_VERSION,
            lo=self.grid.lo,
            hi=self.grid.hi,
            shape=self.grid.shape,
            table=self.table,
            out_of_box=self.out_of_box,
            metadata=json.dumps(self.metadata, sort_keys=True),
            converged=self.converged,
            sweeps=self.sweeps,
        )

    @classmethod
    def load(cls, path) -> "ValueFunction":
        with np.load(path, allow_pickle=False) as z:
            if str(z["format"]) != VALUE_FORMAT or int(z["version"]) != VALUE_VERSION:
                raise ValueError(f"{path} is not a version-{VALUE_VERSION} value file")
            return cls(Grid(z["lo"], z["hi"], z["shape"]), z["table"], str(z["out_of_box"]),
                       json.loads(str(z["metadata"])), bool(z["converged"]), int(z["sweeps"]))


def expectation_operator(grid: Grid, nxt: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fold successor weights into interpolation stencils.

    ``nxt`` is (R, S, d) and ``weights`` (R, S). The result ``(idx, W)`` has
    shape (R, S * 2**d) so that ``gather_sum(V, idx, W)`` is the expected
    interpolated value of each row's successor distribution.
    """
    r, s, d = nxt.shape
    idx, w = grid.stencil(nxt.reshape(r * s, d))
    c = idx.shape[1]
    W = (w * weights.reshape(r * s, 1)).reshape(r, s * c)
    return np.ascontiguousarray(idx.reshape(r, s * c)), np.ascontiguousarray(W)


def policy_evaluation(ens: ModelEnsemble, policy: Callable, spec, grid: Grid,
                      sampling: SamplingConfig = SamplingConfig(), tol: float = 1e-6,
                      max_sweeps: int = 10_000, out_of_box: str = "clamp",
                      strict: bool = False, metadata: dict | None = None) -> ValueFunction:
    """Fitted evaluation of the discounted safety cost of ``policy``.

    Jacobi sweeps ``V <- c + gamma * E[V(x+)]`` over the grid nodes until the
    sup-norm change drops to ``tol``. Successors outside the grid are clamped
    onto it.
    """
    X = grid.nodes()
    U = np.asarray(policy(X), dtype=np.float64).reshape(X.shape[0], 1, -1)
    nxt, w = successor_set(ens, X, U, sampling)
    idx, W = expectation_operator(grid, nxt[:, 0], w[:, 0])
    c = np.asarray(spec.cost(X), dtype=np.float64)
    V, sweeps, converged = _iterate_linear(c, spec.gamma, idx, W, tol, max_sweeps)
    if not converged:
        msg = f"policy evaluation stopped after {sweeps} sweeps without reaching tol={tol}"
        if strict:
            raise NoConvergence(msg)
        logger.warning(msg)
    meta = {"gamma": spec.gamma, "ensemble_seed": int(ens.source_seed), "kind": "policy-evaluation"}
    meta.update(metadata or {})
    return ValueFunction(grid, V, out_of_box, meta, converged, sweeps)


def _iterate_linear(c, gamma, idx, W, tol, max_sweeps):
    V = np.zeros_like(c)
    for sweep in range(1, max_sweeps + 1):
        V_new = c + gamma * kernels.gather_sum(V, idx, W)
        diff = float(np.max(np.abs(V_new - V)))
        V = V_new
        if diff <= tol:
            return V, sweep, True
    return V, max_sweeps, False


@dataclass
class ResidualReport:
    max_abs: float
    mean_abs: float
    residuals: np.ndarray


def bellman_residual(V: ValueFunction, ens: ModelEnsemble, policy: Callable, spec,
                     states: np.ndarray, sampling: SamplingConfig = SamplingConfig()) -> ResidualReport:
    """``V(x) - c(x) - gamma * E[V(x+)]`` at the given states."""
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))
    U = np.asarray(policy(X), dtype=np.float64).reshape(X.shape[0], 1, -1)
    nxt, w = successor_set(ens, X, U, sampling)
    idx, W = expectation_operator(V.grid, nxt[:, 0], w[:, 0])
    ev = kernels.gather_sum(V.table, idx, W)
    r = V.evaluate(X) - np.asarray(spec.cost(X), dtype=np.float64) - spec.gamma * ev
    a = np.abs(r)
    return ResidualReport(float(a.max()), float(a.mean()), r)


def compute_xibar(V: ValueFunction, spec, sampler: Callable[[int, np.random.Generator], np.ndarray],
                  n: int, rng: np.random.Generator, margin_fraction: float = 0.02) -> float:
    """Sublevel bound below the smallest value seen on sampled unsafe states.

    Returns ``(1 - margin_fraction) * min V(x_unsafe)``; the margin hedges
    against the sampled minimum overshooting the true infimum.
    """
    if not 0.0 <= margin_fraction < 1.0:
        raise ValueError("margin_fraction must lie in [0, 1)")
    X = np.atleast_2d(np.asarray(sampler(n, rng), dtype=np.float64))
    if X.size:
        X = X[~np.asarray(spec.is_safe(X), dtype=bool)]
        X = X[V.grid.contains(X)]
    if X.shape[0] == 0:
        raise NoUnsafeStates("no unsafe states inside the value domain were sampled")
    vmin = float(np.min(V.evaluate(X)))
    if vmin <= 0.0:
        raise NonPositiveXibar(f"smallest value on unsafe samples is {vmin:.6g}")
    return (1.0 - margin_fraction) * vmin


@dataclass(eq=False)
class SublevelSet:
    parent: ValueFunction
    threshold: float
    indices: np.ndarray
    nodes: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]

    def contains(self, x) -> np.ndarray:
        return np.asarray(self.parent.evaluate(np.atleast_2d(x))) <= self.threshold


def sublevel_members(V: ValueFunction, xi: float) -> SublevelSet:
    if not xi > 0:
        raise ValueError(f"sublevel threshold must be positive, got {xi}")
    idx = np.flatnonzero(V.table <= xi)
    if idx.size == 0:
        raise EmptySublevelSet(f"no grid node has V <= {xi:.6g} (min V = {V.table.min():.6g})")
    return SublevelSet(V, float(xi), idx, V.grid.nodes()[idx])
