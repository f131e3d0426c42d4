"""Closed-form transition families, registered by name.

A family maps one member's parameter vector plus batched states, controls
and noise realisations to batched successor states. Families with a finite
successor set can also enumerate it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidOverride


@dataclass(frozen=True)
class Family:
    name: str
    transition: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    exact: Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None


FAMILIES: dict[str, Family] = {}


def register_family(family: Family) -> Family:
    FAMILIES[family.name] = family
    return family


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise InvalidOverride(f"unknown transition family {name!r}") from None


def _identity(params, x, u, w):
    return x + u + w


def _linear(params, x, u, w):
    # x+ = a x + b u + w, scalar state and control
    a, b = params[0], params[1]
    return a * x + b * u + w


def _double_integrator(params, x, u, w):
    mass, tau, v_lo, v_hi = params
    p = x[:, 0] + tau * x[:, 1]
    v = np.clip(x[:, 1] + tau * u[:, 0] / mass + w[:, 0], v_lo, v_hi)
    return np.stack([p, v], axis=1)


def mdp_params(P: np.ndarray) -> np.ndarray:
    """Pack an (n, m, n) transition tensor into a flat parameter vector."""
    P = np.asarray(P, dtype=np.float64)
    n, m, n2 = P.shape
    if n != n2:
        raise InvalidOverride(f"transition tensor must be (n, m, n), got {P.shape}")
    return np.concatenate([[n, m], P.ravel()])


def mdp_tensor(params: np.ndarray) -> np.ndarray:
    n, m = int(params[0]), int(params[1])
    return np.asarray(params[2:], dtype=np.float64).reshape(n, m, n)


def _mdp_indices(params, x, u):
    P = mdp_tensor(params)
    n, m = P.shape[0], P.shape[1]
    s = np.clip(np.rint(x[:, 0]), 0, n - 1).astype(np.int64)
    a = np.clip(np.rint(u[:, 0]), 0, m - 1).astype(np.int64)
    return P, s, a


def _finite_mdp(params, x, u, w):
    # inverse-CDF sampling driven by zero-mean uniform noise on [-1/2, 1/2]
    P, s, a = _mdp_indices(params, x, u)
    cum = np.cumsum(P[s, a], axis=1)
    q = np.clip(w[:, 0] + 0.5, 0.0, 1.0)
    nxt = (cum < q[:, None]).sum(axis=1)
    nxt = np.minimum(nxt, P.shape[0] - 1)
    return nxt.astype(np.float64)[:, None]


def _finite_mdp_exact(params, x, u):
    P, s, a = _mdp_indices(params, x, u)
    n = P.shape[0]
    succ = np.broadcast_to(np.arange(n, dtype=np.float64)[None, :, None], (len(s), n, 1))
    return succ, P[s, a]


register_family(Family("identity", _identity))
register_family(Family("linear", _linear))
register_family(Family("double_integrator", _double_integrator))
register_family(Family("finite_mdp", _finite_mdp, _finite_mdp_exact))
