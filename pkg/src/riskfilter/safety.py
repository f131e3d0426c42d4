"""Safe/unsafe partition, immediate safety cost and the feasibility checks on it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateDenominator, EmptyUnsafeSample, InvalidOverride


@dataclass(frozen=True, eq=False)
class SafetySpec:
    """``is_safe`` and ``cost`` are vectorised over state batches of shape (B, d_x)."""

    is_safe: Callable[[np.ndarray], np.ndarray]
    cost: Callable[[np.ndarray], np.ndarray]
    c_hat: float
    gamma: float
    name: str = ""

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise InvalidOverride(f"discount must lie in (0, 1), got {self.gamma}")
        if not self.c_hat > 0.0:
            raise InvalidOverride(f"cost threshold must be positive, got {self.c_hat}")

    def replace(self, **changes) -> "SafetySpec":
        fields = dict(is_safe=self.is_safe, cost=self.cost, c_hat=self.c_hat,
                      gamma=self.gamma, name=self.name)
        fields.update(changes)
        return SafetySpec(**fields)


@dataclass(frozen=True)
class ThetaConstants:
    """Upper envelope ``theta1 c + theta2`` and lower envelope ``theta3 c + theta4`` of V."""

    theta1: float
    theta2: float
    theta3: float = 1.0
    theta4: float = 0.0

    def __post_init__(self):
        if self.theta1 <= 0 or self.theta2 < 0:
            raise InvalidOverride("theta1 must be positive and theta2 non-negative")
        if self.theta3 < 0 or self.theta4 < 0:
            raise InvalidOverride("theta3 and theta4 must be non-negative")

    def premise_ok(self, gamma: float) -> bool:
        return self.theta1 < 1.0 / (1.0 - gamma)

    def as_list(self) -> list[float]:
        return [self.theta1, self.theta2, self.theta3, self.theta4]


@dataclass
class ThresholdReport:
    ok: bool
    min_unsafe_cost: float
    witness: np.ndarray
    n: int


def validate_cost_threshold(spec: SafetySpec, sampler: Callable[[int, np.random.Generator], np.ndarray],
                            n: int, rng: np.random.Generator) -> ThresholdReport:
    """Falsification check of ``c(x) >= c_hat`` on sampled unsafe states."""
    if n < 1:
        raise ValueError("n must be >= 1")
    X = np.atleast_2d(np.asarray(sampler(n, rng), dtype=np.float64))
    if X.size == 0:
        raise EmptyUnsafeSample("unsafe-state sampler returned no states")
    X = X[~np.asarray(spec.is_safe(X), dtype=bool)]
    if X.shape[0] == 0:
        raise EmptyUnsafeSample("sampler returned only safe states")
    c = np.asarray(spec.cost(X), dtype=np.float64)
    i = int(np.argmin(c))
    return ThresholdReport(bool(c[i] >= spec.c_hat), float(c[i]), X[i].copy(), X.shape[0])


def c_hat_lower_bound(th: ThetaConstants, gamma: float) -> float:
    """Smallest admissible cost threshold implied by the envelope constants.

    ``theta2 / (theta3 (theta1 (gamma - 1) + 1)) - theta4 / theta3``; a
    threshold ``c_hat`` must exceed it strictly.
    """
    # theta1*gamma - theta1 + 1 keeps round numbers exact (50, 0.99 -> 0.5)
    denom = th.theta1 * gamma - th.theta1 + 1.0
    if denom <= 0.0:
        raise DegenerateDenominator(
            f"theta1={th.theta1} is not below 1/(1-gamma)={1.0 / (1.0 - gamma):.6g}")
    if th.theta3 <= 0.0:
        raise DegenerateDenominator("theta3 must be positive for the threshold bound")
    return th.theta2 / (th.theta3 * denom) - th.theta4 / th.theta3


@dataclass
class EnvelopeReport:
    upper_ok: bool
    lower_ok: bool
    worst_upper_gap: float
    worst_lower_gap: float
    worst_upper_state: np.ndarray
    worst_lower_state: np.ndarray


def check_value_envelopes(th: ThetaConstants, spec: SafetySpec, V, states: np.ndarray,
                          tol: float = 0.0) -> EnvelopeReport:
    """Check ``theta3 c + theta4 <= V <= theta1 c + theta2`` on sample states.

    Gaps are positive where an envelope is violated.
    """
    X = np.atleast_2d(np.asarray(states, dtype=np.float64))
    v = np.asarray(V(X) if callable(V) else V.evaluate(X), dtype=np.float64)
    c = np.asarray(spec.cost(X), dtype=np.float64)
    up = v - (th.theta1 * c + th.theta2)
    low = (th.theta3 * c + th.theta4) - v
    iu, il = int(np.argmax(up)), int(np.argmax(low))
    return EnvelopeReport(
        upper_ok=bool(up[iu] <= tol),
        lower_ok=bool(low[il] <= tol),
        worst_upper_gap=float(up[iu]),
        worst_lower_gap=float(low[il]),
        worst_upper_state=X[iu].copy(),
        worst_lower_state=X[il].copy(),
    )


def fit_theta(values: np.ndarray, costs: np.ndarray, gamma: float,
              theta1_grid: np.ndarray | None = None) -> ThetaConstants:
    """Tightest envelope constants for tabulated values by a linear scan.

    Scans ``theta1`` below ``1/(1-gamma)``, sets ``theta2`` to the smallest
    offset that makes the upper envelope hold, keeps the trivial lower
    envelope (1, 0) and returns the choice minimising the threshold bound.
    """
    values = np.asarray(values, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    cap = 1.0 / (1.0 - gamma)
    if theta1_grid is None:
        theta1_grid = cap * np.linspace(0.02, 0.98, 49)
    best, best_bound = None, np.inf
    for t1 in theta1_grid:
        if not 0 < t1 < cap:
            continue
        t2 = max(0.0, float(np.max(values - t1 * costs)))
        th = ThetaConstants(float(t1), t2, 1.0, 0.0)
        bound = c_hat_lower_bound(th, gamma)
        if bound < best_bound:
            best, best_bound = th, bound
    if best is None:
        raise DegenerateDenominator("no admissible theta1 in the scan")
    return best
