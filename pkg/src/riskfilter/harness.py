"""End-to-end pipeline: train, bound, certify, then sweep filtered rollouts on a held-out system."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import kendalltau

from .certify import DEFAULT_BETA_GRID, Certificate, certification_gate, optimize_beta_xi
from .dynamics import ModelEnsemble, SamplingConfig, rollout
from .envs import EnvDescriptor, make_env
from .errors import AllBetaInfeasible, ConfigError, MalformedCsv, RiskFilterError, StageError
from .policy import GridPolicy, control_grid, load_policy, train_nominal, train_safe
from .risk import RiskParams
from .rng import substream
from .safety import ThetaConstants, fit_theta
from .safety_filter import CEMConfig, FilterConfig, FilteredPolicy
from .value import Grid, ValueFunction, compute_xibar

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
CSV_COLUMNS = ("beta", "delta_xi", "seed", "violations", "avg_reward", "avg_constrained_quantity")
NOMINAL = "nominal"

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "output_dir": "runs/default",
    "env": {"name": "dintegrator", "overrides": {}},
    "grid": None,
    "ensemble": {"size": 10, "seed": 0},
    "training": {"tol": 1e-6, "max_sweeps": 10000, "noise_samples": 7, "scheme": "quadrature",
                 "control_points": 21},
    "safety": {"theta": None},
    "xibar": {"samples": 10000, "margin_fraction": 0.02},
    "risk": {"samples": 100, "scheme": "mc"},
    "certify": {"beta_grid": None},
    "filter": {"mode": "soft", "beta": None, "xi": None, "lambda": 10.0, "fallback": True, "refine": True,
               "cem": {"iterations": 5, "particles": 10, "elite_count": 3, "initial_std_fraction": 0.3}},
    "sweep": {"beta": [0.01, 0.05, 0.1], "delta_xi": [-8.0, -4.0, 0.0, 4.0, 8.0], "xi_base": "xibar",
              "seeds": [0, 1, 2], "horizon": 100, "x0": None},
}


def _merge(base: dict, new: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and k not in ("overrides",) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment settings; see ``DEFAULTS`` for the schema."""

    data: dict

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        d = dict(d or {})
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg._validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(raw)

    def __getitem__(self, key):
        return self.data[key]

    def with_changes(self, **sections) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.data, sections))

    def _validate(self) -> None:
        sw = self.data["sweep"]
        for key in ("beta", "delta_xi", "seeds"):
            if not isinstance(sw[key], list) or not sw[key]:
                raise ConfigError(f"sweep.{key} must be a non-empty list")
        if any(not b > 0 for b in sw["beta"]):
            raise ConfigError("sweep.beta entries must be positive")
        if int(sw["horizon"]) < 1:
            raise ConfigError("sweep.horizon must be >= 1")
        if not (sw["xi_base"] in ("xibar", "certificate") or isinstance(sw["xi_base"], (int, float))):
            raise ConfigError("sweep.xi_base must be 'xibar', 'certificate' or a number")
        if int(self.data["ensemble"]["size"]) < 1:
            raise ConfigError("ensemble.size must be >= 1")
        if self.data["filter"]["mode"] not in ("hard", "soft"):
            raise ConfigError("filter.mode must be 'hard' or 'soft'")
        fb = self.data["filter"]["beta"]
        if fb is not None and not (isinstance(fb, (int, float)) and fb > 0):
            raise ConfigError("filter.beta must be null or positive")
        if self.data["filter"]["xi"] is not None and not isinstance(self.data["filter"]["xi"], (int, float)):
            raise ConfigError("filter.xi must be null or a number")
        theta = self.data["safety"]["theta"]
        if theta is not None and (not isinstance(theta, list) or len(theta) not in (2, 4)):
            raise ConfigError("safety.theta must be [theta1, theta2] or [theta1, theta2, theta3, theta4]")


@dataclass
class Bundle:
    env: EnvDescriptor
    ensemble: ModelEnsemble
    true_system: ModelEnsemble
    nominal: GridPolicy | None = None
    safe: GridPolicy | None = None
    V_safe: ValueFunction | None = None
    xibar: float | None = None
    certificate: Certificate | None = None
    theta: ThetaConstants | None = None
    rows: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)


class Experiment:
    """Stage runner. Each stage writes its artifact to ``output_dir``; later
    stages reuse artifacts on disk unless ``fresh`` is set."""

    def __init__(self, cfg: ExperimentConfig, output_dir=None, fresh: bool = False):
        self.cfg = cfg
        self.out = Path(output_dir or cfg["output_dir"])
        self.fresh = fresh
        env_cfg = cfg["env"]
        try:
            self.env = make_env(env_cfg["name"], env_cfg.get("overrides") or {})
        except RiskFilterError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg["grid"] is not None:
            g = cfg["grid"]
            self.env.grid = Grid(g.get("lo", self.env.grid.lo), g.get("hi", self.env.grid.hi), g["shape"])
        ens_cfg = cfg["ensemble"]
        ens, held = self.env.make_ensemble(int(ens_cfg["size"]), int(ens_cfg["seed"]))
        self.bundle = Bundle(self.env, ens, ModelEnsemble.single(held, int(ens_cfg["seed"])))
        tr = cfg["training"]
        self.sampling = SamplingConfig(int(tr["noise_samples"]), tr["scheme"], int(cfg["seed"]))
        self.controls = (self.env.controls if self.env.controls is not None
                         else control_grid(self.env.system.control_lo, self.env.system.control_hi,
                                           int(tr["control_points"])))
        self.x0 = (np.asarray(cfg["sweep"]["x0"], dtype=np.float64) if cfg["sweep"]["x0"] is not None
                   else self.env.x0)
        if self.x0.shape != (self.env.system.d_x,):
            raise ConfigError(f"sweep.x0 must have {self.env.system.d_x} entries")
        if not bool(self.env.safety.is_safe(self.x0[None])[0]):
            raise ConfigError(f"initial state {self.x0.tolist()} is unsafe")

    def _path(self, name: str) -> Path:
        return self.out / name

    def _reuse(self, name: str) -> bool:
        return not self.fresh and self._path(name).exists()

    def _stage(self, name, fn):
        try:
            return fn()
        except StageError:
            raise
        except (RiskFilterError, ValueError, FloatingPointError) as exc:
            raise StageError(name, exc) from exc

    def train_nominal(self) -> GridPolicy:
        b = self.bundle
        if b.nominal is None:
            if self._reuse("nominal_policy.npz"):
                b.nominal = load_policy(self._path("nominal_policy.npz"))
            else:
                tr = self.cfg["training"]
                b.nominal = self._stage("train-nominal", lambda: train_nominal(
                    b.ensemble, self.env.reward, self.env.grid, self.controls, self.sampling,
                    float(tr["tol"]), int(tr["max_sweeps"])))
                self.out.mkdir(parents=True, exist_ok=True)
                b.nominal.save(self._path("nominal_policy.npz"))
        return b.nominal

    def train_safe(self) -> tuple[GridPolicy, ValueFunction]:
        b = self.bundle
        if b.safe is None:
            if self._reuse("safe_policy.npz") and self._reuse("value_safe.npz"):
                b.safe = load_policy(self._path("safe_policy.npz"))
                b.V_safe = ValueFunction.load(self._path("value_safe.npz"))
            else:
                tr = self.cfg["training"]
                b.safe, b.V_safe = self._stage("train-safe", lambda: train_safe(
                    b.ensemble, self.env.safety, self.env.grid, self.controls, self.sampling,
                    float(tr["tol"]), int(tr["max_sweeps"])))
                self.out.mkdir(parents=True, exist_ok=True)
                b.safe.save(self._path("safe_policy.npz"))
                b.V_safe.save(self._path("value_safe.npz"))
        return b.safe, b.V_safe

    def compute_xibar(self) -> float:
        b = self.bundle
        if b.xibar is None:
            if self._reuse("xibar.json"):
                b.xibar = float(json.loads(self._path("xibar.json").read_text())["xibar"])
            else:
                _, V = self.train_safe()
                xc = self.cfg["xibar"]
                b.xibar = self._stage("xibar", lambda: compute_xibar(
                    V, self.env.safety, self.env.unsafe_sampler, int(xc["samples"]),
                    substream(int(self.cfg["seed"]), "xibar"), float(xc["margin_fraction"])))
                self._path("xibar.json").write_text(json.dumps({"xibar": b.xibar}, indent=2) + "\n")
        return b.xibar

    def gate(self) -> ThetaConstants:
        """Envelope constants: configured ones gate certification, fitted ones are diagnostic."""
        b = self.bundle
        _, V = self.train_safe()
        theta = self.cfg["safety"]["theta"]
        if theta is None:
            b.theta = fit_theta(V.table, self.env.safety.cost(V.nodes()), self.env.safety.gamma)
            logger.info("fitted envelope constants %s (diagnostic only)", b.theta.as_list())
            return b.theta
        b.theta = ThetaConstants(*[float(t) for t in theta])
        self._stage("gate", lambda: certification_gate(self.env.safety, b.theta, V, V.nodes()))
        return b.theta

    def certify(self) -> Certificate:
        b = self.bundle
        if b.certificate is None:
            if self._reuse("certificate.json"):
                b.certificate = Certificate.load(self._path("certificate.json"))
            else:
                safe, V = self.train_safe()
                xibar = self.compute_xibar()
                self.gate()
                cc, rc = self.cfg["certify"], self.cfg["risk"]
                grid = cc["beta_grid"] or list(DEFAULT_BETA_GRID)
                rp = RiskParams(float(grid[0]), int(rc["samples"]), rc["scheme"])

                def run():
                    try:
                        return optimize_beta_xi(b.ensemble, safe, V, self.env.safety, xibar, grid, rp,
                                                substream(int(self.cfg["seed"]), "certify"))
                    except AllBetaInfeasible as exc:
                        if exc.certificate is not None:
                            exc.certificate.save(self._path("certificate.json"))
                        raise

                b.certificate = self._stage("certify", run)
                b.certificate.save(self._path("certificate.json"))
        return b.certificate

    def filter_config(self, beta: float, xi: float, mode: str | None = None) -> FilterConfig:
        fc, rc = self.cfg["filter"], self.cfg["risk"]
        mode = mode or fc["mode"]
        cert = self.certify() if mode == "hard" else None
        return FilterConfig(
            mode=mode, xi_star=float(xi), rp=RiskParams(float(beta), int(rc["samples"]), rc["scheme"]),
            lagrange_lambda=float(fc["lambda"]), cem=CEMConfig(**fc["cem"]), fallback=bool(fc["fallback"]),
            refine=bool(fc["refine"]), certificate=cert)

    def xi_base(self) -> float:
        base = self.cfg["sweep"]["xi_base"]
        if base == "xibar":
            return self.compute_xibar()
        if base == "certificate":
            return self.certify().xi
        return float(base)

    def filtered_policy(self, beta: float, xi: float, seed: int, mode: str | None = None) -> FilteredPolicy:
        b = self.bundle
        safe, V = self.train_safe()
        return FilteredPolicy(self.train_nominal(), safe, V, b.ensemble, self.filter_config(beta, xi, mode), seed)

    def rollout_row(self, policy, seed: int, beta, delta_xi) -> dict:
        """One rollout on the held-out system; every cell with this seed sees the same noise."""
        sw = self.cfg["sweep"]
        rec = rollout(self.bundle.true_system, policy, self.x0, int(sw["horizon"]), self.env.safety,
                      substream(int(seed), "sweep-rollout"), self.env.reward.reward, seed)
        q = rec.states[1:, self.env.constrained_index]
        return {"beta": beta, "delta_xi": delta_xi, "seed": int(seed), "violations": rec.violations,
                "avg_reward": float(rec.rewards.mean()) if rec.rewards.size else 0.0,
                "avg_constrained_quantity": float(q.mean()) if q.size else 0.0}

    def sweep(self) -> list[dict]:
        b = self.bundle
        sw = self.cfg["sweep"]
        self.train_nominal()
        self.train_safe()
        base = self.xi_base()
        rows, errors = [], []
        for seed in sw["seeds"]:
            rows.append(self.rollout_row(b.nominal, seed, NOMINAL, ""))
            for beta in sw["beta"]:
                for dxi in sw["delta_xi"]:
                    try:
                        pol = self.filtered_policy(float(beta), base + float(dxi), int(seed))
                        rows.append(self.rollout_row(pol, seed, float(beta), float(dxi)))
                    except RiskFilterError as exc:
                        logger.warning("sweep cell beta=%s dxi=%s seed=%s failed: %s", beta, dxi, seed, exc)
                        errors.append({"beta": beta, "delta_xi": dxi, "seed": seed,
                                       "error": f"{type(exc).__name__}: {exc}"})
        b.rows, b.errors = rows, errors
        self.out.mkdir(parents=True, exist_ok=True)
        self._path("sweep.csv").write_text(rows_to_csv(rows))
        if errors:
            self._path("sweep_errors.json").write_text(json.dumps(errors, indent=2) + "\n")
        return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def run_algorithm1(cfg: ExperimentConfig, output_dir=None) -> Bundle:
    """Nominal and safe training, sublevel bound, certificate and the sweep, in that order."""
    exp = Experiment(cfg, output_dir, fresh=True)
    exp.train_nominal()
    exp.train_safe()
    exp.compute_xibar()
    exp.certify()
    exp.sweep()
    return exp.bundle


def sweep(cfg: ExperimentConfig, output_dir=None) -> list[dict]:
    return Experiment(cfg, output_dir).sweep()


@dataclass
class CellSummary:
    beta: str
    delta_xi: str
    n: int
    violations: float
    avg_reward: float
    avg_constrained_quantity: float


@dataclass
class ReportSummary:
    cells: list[CellSummary]
    tau_beta: tuple[float, float]
    tau_delta_xi: tuple[float, float]
    nominal: CellSummary | None
    text: str
    files: list[str]


def read_sweep_csv(path) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
                raise MalformedCsv(f"{path}: expected columns {CSV_COLUMNS}, got {reader.fieldnames}")
            rows = []
            for i, r in enumerate(reader, start=2):
                try:
                    rows.append({
                        "beta": r["beta"] if r["beta"] == NOMINAL else float(r["beta"]),
                        "delta_xi": r["delta_xi"] if r["beta"] == NOMINAL else float(r["delta_xi"]),
                        "seed": int(r["seed"]), "violations": int(r["violations"]),
                        "avg_reward": float(r["avg_reward"]),
                        "avg_constrained_quantity": float(r["avg_constrained_quantity"])})
                except (TypeError, ValueError) as exc:
                    raise MalformedCsv(f"{path}:{i}: {exc}") from exc
    except OSError as exc:
        raise MalformedCsv(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise MalformedCsv(f"{path} has no data rows")
    return rows


def _tau(x, y) -> tuple[float, float]:
    if len(set(x)) < 2 or len(set(y)) < 2:
        return math.nan, math.nan
    res = kendalltau(x, y)
    return float(res.statistic), float(res.pvalue)


def _summaries(rows: list[dict]) -> list[CellSummary]:
    keys = []
    for r in rows:
        k = (r["beta"], r["delta_xi"])
        if k not in keys:
            keys.append(k)
    out = []
    for k in keys:
        sel = [r for r in rows if (r["beta"], r["delta_xi"]) == k]
        out.append(CellSummary(str(k[0]), str(k[1]), len(sel),
                               float(np.mean([r["violations"] for r in sel])),
                               float(np.mean([r["avg_reward"] for r in sel])),
                               float(np.mean([r["avg_constrained_quantity"] for r in sel]))))
    return out


def report(csv_path, output_dir=None) -> ReportSummary:
    """Per-cell means, rank correlations of violations against beta and delta-xi, and curve files.

    The correlations use every filtered (seed-level) row.
    """
    rows = read_sweep_csv(csv_path)
    filt = [r for r in rows if r["beta"] != NOMINAL]
    nom = [r for r in rows if r["beta"] == NOMINAL]
    viol = [r["violations"] for r in filt]
    tau_b = _tau([r["beta"] for r in filt], viol)
    tau_x = _tau([r["delta_xi"] for r in filt], viol)
    cells = _summaries(filt)
    nominal = _summaries(nom)[0] if nom else None
    out = Path(output_dir) if output_dir is not None else Path(csv_path).parent
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for beta in sorted({c.beta for c in cells}, key=float):
        path = out / f"curve_beta_{beta}.csv"
        sel = sorted((c for c in cells if c.beta == beta), key=lambda c: float(c.delta_xi))
        lines = ["delta_xi,mean_violations,mean_avg_reward,mean_avg_constrained_quantity"]
        lines += [f"{c.delta_xi},{c.violations!r},{c.avg_reward!r},{c.avg_constrained_quantity!r}" for c in sel]
        path.write_text("\n".join(lines) + "\n")
        files.append(str(path))
    if nominal is not None:
        path = out / "curve_nominal.csv"
        path.write_text("mean_violations,mean_avg_reward,mean_avg_constrained_quantity\n"
                        f"{nominal.violations!r},{nominal.avg_reward!r},{nominal.avg_constrained_quantity!r}\n")
        files.append(str(path))
    lines = [f"{'beta':>10} {'delta_xi':>10} {'n':>3} {'violations':>11} {'avg_reward':>11} {'constrained':>12}"]
    for c in ([nominal] if nominal else []) + cells:
        lines.append(f"{c.beta:>10} {c.delta_xi:>10} {c.n:>3} {c.violations:>11.3f} {c.avg_reward:>11.4f} "
                     f"{c.avg_constrained_quantity:>12.4f}")
    lines.append(f"kendall tau(violations, beta)     = {tau_b[0]:+.3f}  p = {tau_b[1]:.3g}")
    lines.append(f"kendall tau(violations, delta_xi) = {tau_x[0]:+.3f}  p = {tau_x[1]:.3g}")
    text = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    files.append(str(out / "report.txt"))
    return ReportSummary(cells, tau_b, tau_x, nominal, text, files)
