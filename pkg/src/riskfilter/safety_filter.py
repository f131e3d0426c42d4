"""Online risk-sensitive safety filter solved with the cross-entropy method."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .certify import Certificate
from .dynamics import ModelEnsemble, draw
from .errors import CertificateMissing, InvalidOverride
from .risk import RiskParams, risk_next_value
from .rng import substream

# hard-mode penalty weight per unit of box diagonal
BIG_FACTOR = 1e6


@dataclass(frozen=True)
class CEMConfig:
    iterations: int = 5
    particles: int = 10
    elite_count: int = 3
    initial_std_fraction: float = 0.3

    def __post_init__(self):
        if self.iterations < 1 or self.particles < 1:
            raise InvalidOverride("CEM needs at least one iteration and one particle")
        if not 1 <= self.elite_count <= self.particles:
            raise InvalidOverride("elite_count must lie in [1, particles]")
        if not self.initial_std_fraction > 0:
            raise InvalidOverride("initial_std_fraction must be positive")


@dataclass(frozen=True)
class FilterConfig:
    mode: str
    xi_star: float
    rp: RiskParams
    lagrange_lambda: float = 10.0
    cem: CEMConfig = field(default_factory=CEMConfig)
    fallback: bool = True
    certificate: Certificate | None = None
    refine: bool = True

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise InvalidOverride(f"filter mode must be 'hard' or 'soft', got {self.mode!r}")
        if self.lagrange_lambda < 0:
            raise InvalidOverride("lagrange_lambda must be non-negative")
        if self.certificate is not None and not self.xi_star < self.certificate.xibar:
            raise InvalidOverride(
                f"xi_star={self.xi_star} must stay below the certificate's xibar={self.certificate.xibar}")


def _truncated_normal(mean, std, lo, hi, size, rng):
    """Box-truncated Gaussian by inverse-CDF sampling; zero-width axes return the mean."""
    with np.errstate(divide="ignore", invalid="ignore"):
        a = ndtr((lo - mean) / std)
        b = ndtr((hi - mean) / std)
        q = a + rng.random((size, mean.shape[0])) * (b - a)
        out = mean + std * ndtri(q)
    out = np.where(np.isfinite(out) & (std > 0), out, mean)
    return np.clip(out, lo, hi)


def cem_minimize(objective: Callable[[np.ndarray], np.ndarray], mean, lo, hi, cfg: CEMConfig,
                 rng: np.random.Generator, extra=None) -> tuple[np.ndarray, float]:
    """Minimise a batched objective over a box; returns the best particle ever seen.

    ``objective`` maps (K, d) controls to (K,) costs; NaN counts as +inf. The
    running mean is always one of the particles and ``extra`` candidates
    join the first population. Each iteration refits the mean to the elites
    and the per-axis spread to the elites' distance from the previous mean.
    """
    lo = np.array(lo, dtype=np.float64, ndmin=1)
    hi = np.array(hi, dtype=np.float64, ndmin=1)
    if np.any(hi < lo):
        raise InvalidOverride("empty control box")
    mu = np.clip(np.array(mean, dtype=np.float64, ndmin=1), lo, hi)
    std = cfg.initial_std_fraction * 0.5 * (hi - lo)
    best_u, best_f = mu.copy(), np.inf
    for it in range(cfg.iterations):
        P = _truncated_normal(mu, std, lo, hi, max(cfg.particles - 1, 0), rng)
        P = np.vstack([mu[None], P])
        if it == 0 and extra is not None:
            P = np.vstack([P, np.clip(np.atleast_2d(np.asarray(extra, dtype=np.float64)), lo, hi)])
        f = np.asarray(objective(P), dtype=np.float64)
        f = np.where(np.isnan(f), np.inf, f)
        order = np.argsort(f, kind="stable")
        if f[order[0]] < best_f:
            best_f, best_u = float(f[order[0]]), P[order[0]].copy()
        elite = P[order[: cfg.elite_count]]
        # spread about the previous mean keeps the step size while the mean is still travelling;
        # the spread about the new mean collapses before reaching a distant optimum
        mu, std = elite.mean(axis=0), np.sqrt(np.mean((elite - mu) ** 2, axis=0))
    return best_u, best_f


def refine_on_segment(objective: Callable[[np.ndarray], np.ndarray], start, target, f_start: float,
                      rounds: int = 3, points: int = 33) -> tuple[np.ndarray, float]:
    """Zoom search over ``start + t (target - start)``, ``t`` in [0, 1].

    Never returns anything worse than ``(start, f_start)``.
    """
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(target, dtype=np.float64) - start
    best_u, best_f = start, float(f_start)
    lo_t, hi_t = 0.0, 1.0
    for _ in range(rounds):
        t = np.linspace(lo_t, hi_t, points)
        f = np.asarray(objective(start[None] + t[:, None] * step[None]), dtype=np.float64)
        f = np.where(np.isnan(f), np.inf, f)
        i = int(np.argmin(f))
        if f[i] < best_f:
            best_u, best_f = start + t[i] * step, float(f[i])
        h = (hi_t - lo_t) / (points - 1)
        lo_t, hi_t = max(0.0, t[i] - h), min(1.0, t[i] + h)
    return best_u, best_f


@dataclass
class FilterResult:
    u: np.ndarray
    intervened: bool
    risk_at_u: float
    fell_back: bool
    breakdown: bool
    risk_nominal: float

    def as_info(self) -> dict:
        return {"intervened": self.intervened, "risk_at_u": self.risk_at_u, "fell_back": self.fell_back,
                "breakdown": self.breakdown, "risk_nominal": self.risk_nominal}


def filter_control(x, nominal: Callable, safe: Callable, V_safe, ens: ModelEnsemble, fc: FilterConfig,
                   rng: np.random.Generator) -> FilterResult:
    """Control closest to ``nominal(x)`` whose successor risk stays within ``xi_star``.

    All candidates at this state are scored on the same successor draws.
    """
    sys = ens.template
    x = np.asarray(x, dtype=np.float64).reshape(sys.d_x)
    if fc.mode == "hard" and (fc.certificate is None or not fc.certificate.feasible):
        raise CertificateMissing("hard-mode filtering needs a feasible certificate")
    draws = draw(ens, fc.rp.samples, rng) if fc.rp.scheme == "mc" else None

    def risk(U):
        return risk_next_value(ens, x, U, V_safe, fc.rp, draws=draws)

    u_nom = sys.clip_control(np.asarray(nominal(x), dtype=np.float64).reshape(sys.d_u))
    u_safe = sys.clip_control(np.asarray(safe(x), dtype=np.float64).reshape(sys.d_u))
    r_nom, r_safe = risk(np.stack([u_nom, u_safe]))
    breakdown = bool(r_safe > fc.xi_star)
    if r_nom <= fc.xi_star:
        return FilterResult(u_nom, False, float(r_nom), False, breakdown, float(r_nom))

    lo, hi = sys.control_lo, sys.control_hi
    weight = BIG_FACTOR * float(np.linalg.norm(hi - lo)) if fc.mode == "hard" else fc.lagrange_lambda

    def objective(U):
        excess = np.maximum(0.0, risk(U) - fc.xi_star)
        return np.linalg.norm(U - u_nom, axis=1) + weight * excess

    u, f = cem_minimize(objective, u_nom, lo, hi, fc.cem, rng, extra=u_safe[None])
    if fc.refine:
        # CEM's elites sit inside the feasible side and stop short of the boundary
        u, f = refine_on_segment(objective, u, u_nom, f)
    r_u = float(risk(u[None])[0])
    if fc.mode == "hard" and r_u > fc.xi_star and fc.fallback:
        return FilterResult(u_safe, True, float(r_safe), True, breakdown, float(r_nom))
    return FilterResult(u, not np.array_equal(u, u_nom), r_u, False, breakdown, float(r_nom))


class FilteredPolicy:
    """Stateful wrapper that filters one state per call.

    Step ``t`` draws from substream ``(seed, t)``, so two policies with the
    same seed see the same random numbers step by step.
    """

    def __init__(self, nominal: Callable, safe: Callable, V_safe, ens: ModelEnsemble, fc: FilterConfig,
                 seed: int = 0):
        self.nominal, self.safe, self.V_safe, self.ens, self.fc = nominal, safe, V_safe, ens, fc
        self.seed = int(seed)
        self.t = 0
        self.last_info: dict = {}
        self.last_result: FilterResult | None = None

    def reset(self) -> None:
        self.t = 0
        self.last_info = {}
        self.last_result = None

    def __call__(self, x) -> np.ndarray:
        res = filter_control(x, self.nominal, self.safe, self.V_safe, self.ens, self.fc,
                             substream(self.seed, "filter-step", self.t))
        self.t += 1
        self.last_result = res
        self.last_info = res.as_info()
        return res.u
