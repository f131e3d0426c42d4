"""Entropic risk ``(1/beta) log E[exp(beta C)]`` and its estimators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .dynamics import Draws, ModelEnsemble, SamplingConfig, apply_draws, draw, successor_set


@dataclass(frozen=True)
class RiskParams:
    """Risk aversion and how the successor distribution is approximated.

    ``scheme="mc"`` uses ``samples`` random (member, noise) draws.
    ``scheme="quadrature"`` enumerates finite successor sets exactly and uses
    ``quadrature_nodes`` Gauss nodes per noise axis otherwise.
    """

    beta: float
    samples: int = 100
    scheme: str = "mc"
    quadrature_nodes: int = 21

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.scheme not in ("mc", "quadrature"):
            raise ValueError(f"unknown risk scheme {self.scheme!r}")

    def with_beta(self, beta: float) -> "RiskParams":
        return RiskParams(beta, self.samples, self.scheme, self.quadrature_nodes)


def risk_of_samples(samples, beta: float, weights=None) -> float:
    """Stable entropic risk of an (optionally weighted) empirical law."""
    v = np.asarray(samples, dtype=np.float64).reshape(1, -1)
    if v.size == 0:
        raise ValueError("need at least one sample")
    if not beta > 0:
        raise ValueError("beta must be positive")
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("risk of non-finite samples")
    if weights is None:
        w = np.full_like(v, 1.0 / v.size)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
        w = w / w.sum()
    return float(kernels.row_logmeanexp(v, w, float(beta))[0])


def risk_rows(values: np.ndarray, weights: np.ndarray, beta: float) -> np.ndarray:
    """Row-wise weighted risk of a (B, S) value matrix."""
    return kernels.row_logmeanexp(np.ascontiguousarray(values, dtype=np.float64),
                                  np.ascontiguousarray(weights, dtype=np.float64), float(beta))


def risk_standard_error(samples, beta: float) -> float:
    """Delta-method standard error of the Monte-Carlo risk estimate."""
    v = np.asarray(samples, dtype=np.float64).ravel()
    z = np.exp(beta * (v - v.max()))
    mean = z.mean()
    if v.size < 2 or mean == 0.0:
        return 0.0
    return float(z.std(ddof=1) / (math.sqrt(v.size) * mean * beta))


def successor_values(ens: ModelEnsemble, X: np.ndarray, U: np.ndarray, V, rp: RiskParams,
                     rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Values of successor states for a batch of (state, control) rows.

    Returns ``(values, weights)``, each (B, S). Monte-Carlo rows use
    independent draws per row.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    U = np.asarray(U, dtype=np.float64).reshape(X.shape[0], -1)
    b, d = X.shape
    if rp.scheme == "quadrature":
        nxt, w = successor_set(ens, X, U[:, None, :],
                               SamplingConfig(rp.quadrature_nodes, "quadrature"))
        s = nxt.shape[2]
        vals = np.asarray(V(nxt.reshape(b * s, d))).reshape(b, s)
        return vals, w[:, 0]
    if rng is None:
        raise ValueError("Monte-Carlo risk estimation needs a generator")
    m = rp.samples
    members = (np.zeros((b, m), dtype=np.int64) if len(ens) == 1
               else rng.choice(len(ens), size=(b, m), p=ens.member_weights))
    base = ens.noise.base((b, m), rng)
    sys = ens.template
    xs = np.repeat(sys.clamp_marginal(X), m, axis=0)
    us = np.repeat(sys.clip_control(U), m, axis=0)
    nxt = ens.transition_rows(xs, us, members.ravel(), base.reshape(b * m, -1))
    vals = np.asarray(V(nxt)).reshape(b, m)
    return vals, np.full((b, m), 1.0 / m)


def risk_next_value(ens: ModelEnsemble, x, u, V, rp: RiskParams,
                    rng: np.random.Generator | None = None, draws: Draws | None = None):
    """Risk of ``V(f(x, u, w))`` with ``f`` drawn from the ensemble.

    ``u`` may be a single control (returns a float) or a (K, d_u) stack, in
    which case every candidate is scored on the same draws.
    """
    u_arr = np.asarray(u, dtype=np.float64)
    single = u_arr.ndim <= 1
    U = u_arr.reshape(-1, ens.template.d_u)
    if rp.scheme == "quadrature":
        X = np.repeat(np.asarray(x, dtype=np.float64).reshape(1, -1), U.shape[0], axis=0)
        vals, w = successor_values(ens, X, U, V, rp)
    else:
        if draws is None:
            if rng is None:
                raise ValueError("Monte-Carlo risk estimation needs a generator or draws")
            draws = draw(ens, rp.samples, rng)
        nxt = apply_draws(ens, x, U, draws)
        k, m, d = nxt.shape
        vals = np.asarray(V(nxt.reshape(k * m, d))).reshape(k, m)
        w = np.full((k, m), 1.0 / m)
    out = risk_rows(vals, w, rp.beta)
    return float(out[0]) if single else out
