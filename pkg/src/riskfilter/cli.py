"""Command-line entry point. Exit codes: 0 ok, 2 config error, 3 stage failure."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, RiskFilterError
from .harness import Experiment, ExperimentConfig, report, run_algorithm1

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _experiment(args, fresh: bool) -> Experiment:
    cfg = ExperimentConfig.load(args.config)
    return Experiment(cfg, args.output_dir, fresh=fresh or args.fresh)


def cmd_train_nominal(args) -> None:
    exp = _experiment(args, fresh=True)
    pol = exp.train_nominal()
    print(f"nominal policy: {exp.out / 'nominal_policy.npz'} (sweeps={pol.metadata['sweeps']}, "
          f"converged={pol.metadata['converged']})")


def cmd_train_safe(args) -> None:
    exp = _experiment(args, fresh=True)
    _, V = exp.train_safe()
    print(f"safe policy: {exp.out / 'safe_policy.npz'}; value: {exp.out / 'value_safe.npz'} "
          f"(min={V.table.min():.6g}, max={V.table.max():.6g}, sweeps={V.sweeps})")


def cmd_xibar(args) -> None:
    exp = _experiment(args, fresh=False)
    exp.bundle.xibar = None
    exp.fresh = True
    xb = exp.compute_xibar()
    print(f"xibar = {xb!r}")


def cmd_certify(args) -> None:
    exp = _experiment(args, fresh=False)
    exp.fresh = True
    cert = exp.certify()
    print(f"{'beta':>12} {'xi(beta)':>14} {'delta(beta)':>12} feasible")
    for row in cert.table:
        print(f"{row['beta']:>12.5g} {row['xi']:>14.6g} {row['delta']:>12.5g} {row['feasible']}")
    print(f"selected beta={cert.beta:.5g} xi={cert.xi:.6g} xibar={cert.xibar:.6g} delta={cert.delta:.5g} "
          f"on {cert.verified_on} nodes")


def cmd_rollout(args) -> None:
    exp = _experiment(args, fresh=False)
    cert = exp.certify()
    fc = exp.cfg["filter"]
    # command line, then config, then the certificate
    beta = next(v for v in (args.beta, fc["beta"], cert.beta) if v is not None)
    xi = next(v for v in (args.xi, fc["xi"], cert.xi) if v is not None)
    if args.nominal:
        policy = exp.train_nominal()
        label = "nominal"
    else:
        policy = exp.filtered_policy(beta, xi, args.seed, args.mode)
        label = f"filtered beta={beta:.5g} xi={xi:.6g}"
    row = exp.rollout_row(policy, args.seed, beta, xi)
    print(f"{label}: violations={row['violations']} avg_reward={row['avg_reward']:.6g} "
          f"avg_constrained_quantity={row['avg_constrained_quantity']:.6g}")


def cmd_sweep(args) -> None:
    exp = _experiment(args, fresh=False)
    rows = exp.sweep()
    print(f"wrote {len(rows)} rows to {exp.out / 'sweep.csv'}")
    if exp.bundle.errors:
        print(f"{len(exp.bundle.errors)} cells failed; see {exp.out / 'sweep_errors.json'}")


def cmd_report(args) -> None:
    summary = report(args.csv, args.output_dir)
    sys.stdout.write(summary.text)


def cmd_run(args) -> None:
    cfg = ExperimentConfig.load(args.config)
    b = run_algorithm1(cfg, args.output_dir)
    print(f"xibar={b.xibar!r} beta*={b.certificate.beta:.5g} xi*={b.certificate.xi:.6g} "
          f"delta*={b.certificate.delta:.5g}; {len(b.rows)} sweep rows")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riskfilter", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def staged(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--output-dir", default=None, help="overrides output_dir from the config")
        s.add_argument("--fresh", action="store_true", help="recompute upstream artifacts")
        s.set_defaults(func=fn)
        return s

    staged("train-nominal", cmd_train_nominal, "fit the reward-maximising policy")
    staged("train-safe", cmd_train_safe, "fit the safe backup policy and its value")
    staged("xibar", cmd_xibar, "sublevel bound from sampled unsafe states")
    staged("certify", cmd_certify, "search beta and print the certificate table")
    r = staged("rollout", cmd_rollout, "one rollout on the held-out system")
    r.add_argument("--beta", type=float, default=None)
    r.add_argument("--xi", type=float, default=None)
    r.add_argument("--mode", choices=("hard", "soft"), default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--nominal", action="store_true", help="run the unfiltered nominal policy")
    staged("sweep", cmd_sweep, "filtered rollouts over the (beta, delta_xi, seed) grid")
    staged("run", cmd_run, "full pipeline from training to sweep")
    rep = sub.add_parser("report", help="summarise a sweep CSV")
    rep.add_argument("csv")
    rep.add_argument("--output-dir", default=None)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RiskFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
