"""Time the numba and numpy kernels on inputs the size the pipeline uses.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Kernel timings call both backend modules directly. The end-to-end timing
trains the dintegrator safe policy once per backend in a subprocess, since
the backend is fixed when the package is imported.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from riskfilter.kernels import backends

E2E = """
import time
from riskfilter import kernels
from riskfilter.envs import make_env
from riskfilter.policy import train_safe
env = make_env("dintegrator")
ens, _ = env.make_ensemble(10, 0)
train_safe(ens, env.safety, env.grid)  # warm-up, includes any JIT compilation
t0 = time.perf_counter()
train_safe(ens, env.safety, env.grid)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def workloads(rng: np.random.Generator) -> dict:
    # 402 grid nodes x 21 controls x 10 members x 7 noise nodes, as in dintegrator training
    shape = np.array([2, 201], dtype=np.int64)
    lo, hi = np.array([-20.0, -10.0]), np.array([20.0, 10.0])
    pts = rng.uniform(lo, hi, size=(402 * 21 * 70, 2))
    idx, w = backends()["numpy"].interp_stencil(pts, lo, hi, shape)
    table = rng.standard_normal(int(shape.prod()))
    values = rng.normal(500.0, 50.0, size=(20_000, 100))
    weights = np.full_like(values, 1.0 / values.shape[1])
    return {
        "interp_stencil": lambda mod: mod.interp_stencil(pts, lo, hi, shape),
        "gather_sum": lambda mod: mod.gather_sum(table, idx, w),
        "row_logmeanexp": lambda mod: mod.row_logmeanexp(values, weights, 0.05),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    mods = backends()
    jobs = workloads(np.random.default_rng(0))
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name in mods) + f"{'speedup':>10}")
    for kernel, job in jobs.items():
        best = {}
        for name, mod in mods.items():
            job(mod)  # warm-up
            best[name] = min(timeit.repeat(lambda: job(mod), number=1, repeat=args.repeat))
        ratio = best["numpy"] / best["numba"] if "numba" in best else float("nan")
        print(f"{kernel:<16}" + "".join(f"{best[n] * 1e3:>10.2f}ms" for n in mods) + f"{ratio:>9.1f}x")

    if args.end_to_end:
        for name in mods:
            env = dict(os.environ, RISKFILTER_BACKEND=name)
            out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True,
                                 check=True)
            backend, seconds = out.stdout.split()
            print(f"train_safe dintegrator [{backend}]: {float(seconds):.2f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
