"""Risk certificates for sublevel sets of a safety value function."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest

from .dynamics import ModelEnsemble, SamplingConfig, successor_set
from .errors import (AllBetaInfeasible, BetaUnderflow, CertificationRefused,
                     ExpectationPremiseViolated, Theta1TooLarge)
from .risk import RiskParams, risk_rows, successor_values
from .safety import ThetaConstants, c_hat_lower_bound, check_value_envelopes
from .value import ValueFunction, sublevel_members

CERT_FORMAT = "riskfilter.certificate"
CERT_VERSION = 1

DEFAULT_BETA_GRID = tuple(float(b) for b in np.logspace(-3, 1, 16))

# halving stops once the risk parameter drops below this
BETA_FLOOR = 1e-12


def fingerprint(obj) -> str:
    """Short content hash of a value table or grid policy; class name otherwise."""
    table = getattr(obj, "table", None)
    if table is None:
        return type(obj).__name__
    digest = hashlib.sha256(np.ascontiguousarray(table, dtype=np.float64).tobytes()).hexdigest()
    return f"{type(obj).__name__}:{digest[:16]}"


@dataclass
class Certificate:
    beta: float
    xi: float
    xibar: float
    delta: float
    verified_on: int
    worst_risk: float
    feasible: bool
    policy_id: str = ""
    value_id: str = ""
    counterexample: list[float] | None = None
    # per-beta rows of the search: beta, xi, delta, feasible
    table: list[dict] = field(default_factory=list)

    @property
    def log_delta(self) -> float:
        return self.beta * (self.xi - self.xibar)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(format=CERT_FORMAT, version=CERT_VERSION)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        if d.get("format") != CERT_FORMAT or d.get("version") != CERT_VERSION:
            raise ValueError(f"not a version-{CERT_VERSION} certificate")
        d = {k: v for k, v in d.items() if k not in ("format", "version")}
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Certificate":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def delta_of(beta: float, xi: float, xibar: float) -> float:
    """``exp(beta (xi - xibar))``, reported as 1 once ``xi >= xibar``."""
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    return min(1.0, math.exp(beta * (xi - xibar)))


def _node_values(ens: ModelEnsemble, policy, V: ValueFunction, nodes: np.ndarray, rp: RiskParams,
                 rng: np.random.Generator | None):
    U = np.asarray(policy(nodes), dtype=np.float64).reshape(nodes.shape[0], -1)
    return successor_values(ens, nodes, U, V, rp, rng)


def _certificate(beta, xi, xibar, risks, nodes, policy, V, table=None) -> Certificate:
    i = int(np.argmax(risks))
    worst = float(risks[i])
    feasible = bool(worst <= xi < xibar)
    return Certificate(
        beta=float(beta), xi=float(xi), xibar=float(xibar), delta=delta_of(beta, xi, xibar),
        verified_on=int(nodes.shape[0]), worst_risk=worst, feasible=feasible,
        policy_id=fingerprint(policy), value_id=fingerprint(V),
        counterexample=None if feasible else nodes[i].tolist(), table=table or [])


def verify_prop1(ens: ModelEnsemble, policy, V: ValueFunction, spec, xibar: float, rp: RiskParams,
                 xi: float, rng: np.random.Generator | None = None) -> Certificate:
    """Check the risk condition at every grid node of the ``xibar``-sublevel set."""
    if not 0 < xi < xibar:
        raise ValueError(f"need 0 < xi < xibar, got xi={xi}, xibar={xibar}")
    sub = sublevel_members(V, xibar)
    vals, w = _node_values(ens, policy, V, sub.nodes, rp, rng)
    return _certificate(rp.beta, xi, xibar, risk_rows(vals, w, rp.beta), sub.nodes, policy, V)


def best_beta(betas, xis, xibar: float) -> int | None:
    """Index minimising ``beta (xi - xibar)`` among feasible entries; ties go to the larger beta."""
    best, key = None, None
    for i, (b, x) in enumerate(zip(betas, xis)):
        if not x < xibar:
            continue
        k = (b * (x - xibar), -b)
        if key is None or k < key:
            best, key = i, k
    return best


def optimize_beta_xi(ens: ModelEnsemble, policy, V: ValueFunction, spec, xibar: float,
                     beta_grid=DEFAULT_BETA_GRID, rp: RiskParams | None = None,
                     rng: np.random.Generator | None = None) -> Certificate:
    """Smallest certified ``delta`` over a grid of risk parameters.

    Each beta gets the tightest threshold ``xi(beta)``, the largest node risk.
    Successor draws are made once and shared by every beta.
    """
    betas = [float(b) for b in beta_grid]
    if not betas or any(b <= 0 for b in betas) or any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValueError("beta grid must be non-empty, positive and strictly ascending")
    rp = rp or RiskParams(betas[0])
    sub = sublevel_members(V, xibar)
    vals, w = _node_values(ens, policy, V, sub.nodes, rp, rng)
    risks = [risk_rows(vals, w, b) for b in betas]
    xis = [float(r.max()) for r in risks]
    table = [{"beta": b, "xi": x, "delta": delta_of(b, x, xibar), "feasible": bool(x < xibar)}
             for b, x in zip(betas, xis)]
    i = best_beta(betas, xis, xibar)
    if i is None:
        j = int(np.argmin(xis))
        cert = _certificate(betas[j], xis[j], xibar, risks[j], sub.nodes, policy, V, table)
        raise AllBetaInfeasible(
            f"no beta on the grid gives xi < xibar={xibar:.6g} (smallest xi {xis[j]:.6g} at "
            f"beta={betas[j]:.3g}); the filter would break down", cert)
    return _certificate(betas[i], xis[i], xibar, risks[i], sub.nodes, policy, V, table)


def find_beta_for_expectation(ens: ModelEnsemble, policy, V: ValueFunction, spec, xibar: float,
                              rp: RiskParams, rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Halve beta from 1 until the worst node risk sits below the midpoint of
    the worst expected successor value and ``xibar``; returns ``(beta, xi)``."""
    sub = sublevel_members(V, xibar)
    vals, w = _node_values(ens, policy, V, sub.nodes, rp, rng)
    xi_mean = float(np.max(np.sum(vals * w, axis=1)))
    if xi_mean >= xibar:
        raise ExpectationPremiseViolated(
            f"largest expected successor value {xi_mean:.6g} is not below xibar={xibar:.6g}")
    target = 0.5 * (xi_mean + xibar)
    beta = 1.0
    while beta >= BETA_FLOOR:
        worst = float(risk_rows(vals, w, beta).max())
        if worst <= target:
            return beta, worst
        beta *= 0.5
    raise BetaUnderflow(f"no beta >= {BETA_FLOOR} brings the risk below {target:.6g}")


def decrease_slope(theta1, gamma):
    """Slope ``(theta1 - theta1 gamma - 1) / (theta1 gamma)`` of the decrease bound.

    Works for floats and ``fractions.Fraction`` alike.
    """
    if not theta1 > 0:
        raise Theta1TooLarge(f"theta1 must be positive, got {theta1}")
    if theta1 * (1 - gamma) >= 1:
        raise Theta1TooLarge(f"theta1={theta1} must stay below 1/(1-gamma)")
    return (theta1 - theta1 * gamma - 1) / (theta1 * gamma)


def lemma3_decrease_bound(theta1, theta2, gamma, v):
    """Upper bound on ``E[V(x+)] - V(x)`` at value ``v`` under the envelope constants."""
    return decrease_slope(theta1, gamma) * v + theta2 / (gamma * theta1)


@dataclass
class GateReport:
    c_hat: float
    bound: float
    envelope_ok: bool
    worst_upper_gap: float


def certification_gate(spec, theta: ThetaConstants, V: ValueFunction, states: np.ndarray) -> GateReport:
    """Refuse certification when the cost threshold cannot support the envelope constants."""
    bound = c_hat_lower_bound(theta, spec.gamma)
    if not spec.c_hat > bound:
        raise CertificationRefused(
            f"cost threshold c_hat={spec.c_hat:.6g} must exceed {bound:.6g} implied by theta="
            f"{theta.as_list()} and gamma={spec.gamma}")
    env = check_value_envelopes(theta, spec, V, states)
    if not env.upper_ok:
        raise CertificationRefused(
            f"value exceeds theta1*c+theta2 by {env.worst_upper_gap:.6g} at {env.worst_upper_state.tolist()}")
    return GateReport(float(spec.c_hat), float(bound), env.upper_ok, env.worst_upper_gap)


@dataclass
class ExitReport:
    rate: float
    ci_low: float
    ci_high: float
    exits: int
    n: int
    confidence: float


def _start_states(V: ValueFunction, xi: float, n: int, rng: np.random.Generator) -> np.ndarray:
    sub = sublevel_members(V, xi)
    return sub.nodes[rng.integers(len(sub), size=n)]


def _closed_loop_step(ens: ModelEnsemble, policy, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    members = (np.zeros(n, dtype=np.int64) if len(ens) == 1
               else rng.choice(len(ens), size=n, p=ens.member_weights))
    U = np.asarray(policy(X), dtype=np.float64).reshape(n, -1)
    sys = ens.template
    return ens.transition_rows(sys.clamp_marginal(X), sys.clip_control(U), members,
                               ens.noise.base((n,), rng))


def mc_delta_safety(ens: ModelEnsemble, policy, V: ValueFunction, xi: float, spec, n: int,
                    rng: np.random.Generator, confidence: float = 0.99) -> ExitReport:
    """One-step exit frequency from the ``xi``-sublevel set, with a Wilson interval.

    Start states are drawn uniformly from the sublevel grid nodes.
    """
    X = _start_states(V, xi, n, rng)
    nxt = _closed_loop_step(ens, policy, X, rng)
    exits = int(np.count_nonzero(np.asarray(V.evaluate(nxt)) > xi))
    ci = binomtest(exits, n).proportion_ci(confidence_level=confidence, method="wilson")
    return ExitReport(exits / n, float(ci.low), float(ci.high), exits, n, confidence)


@dataclass
class StayReport:
    empirical: float
    standard_error: float
    bound: float | None
    horizon: int
    n: int


def kstep_stay_probability(ens: ModelEnsemble, policy, V: ValueFunction, xi: float, K: int, n: int,
                           rng: np.random.Generator, delta: float | None = None) -> StayReport:
    """Fraction of K-step closed-loop runs that never leave the ``xi``-sublevel set.

    The model is redrawn from the ensemble at every step, matching the
    per-transition probability the certificate bounds.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    X = _start_states(V, xi, n, rng)
    inside = np.ones(n, dtype=bool)
    for _ in range(K):
        X = _closed_loop_step(ens, policy, X, rng)
        inside &= np.asarray(V.evaluate(X)) <= xi
    p = float(inside.mean())
    bound = None if delta is None else (1.0 - delta) ** K
    return StayReport(p, math.sqrt(p * (1.0 - p) / n), bound, K, n)


def exact_exit_probability(ens: ModelEnsemble, policy, V: ValueFunction, level: float) -> np.ndarray:
    """Per-node probability of leaving the ``level``-sublevel set, by exact enumeration.

    Only defined for ensembles whose family lists its successors exactly.
    """
    if not ens.has_exact:
        raise ValueError("exact exit probabilities need an enumerable transition family")
    sub = sublevel_members(V, level)
    U = np.asarray(policy(sub.nodes), dtype=np.float64).reshape(len(sub), 1, -1)
    nxt, w = successor_set(ens, sub.nodes, U, SamplingConfig(scheme="quadrature"))
    n, _, s, d = nxt.shape
    out = np.asarray(V.evaluate(nxt.reshape(n * s, d))).reshape(n, s) > level
    return np.sum(w[:, 0] * out, axis=1)
