"""Compare the compiled and pure-numpy kernel backends.

Runs the same workloads in two subprocesses, one per MFGLAB_BACKEND value,
and prints a timing table.  Usage:

    python3 benchmarks/bench_backends.py [--quick]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json
import time

import numpy as np

import mfglab
from mfglab import fbsde, lq
from mfglab.fixedpoint import solve_a_n, solve_phi
from mfglab.measures import EmpiricalMeasure
from mfglab.model import InteractionSpec, ModelSpec

quick = __QUICK__
model = ModelSpec(
    dim=1, horizon=1.0, kappa_x=0.3, kappa_a=1.0, kappa_g=0.8,
    interaction=InteractionSpec(c_aa=0.4, c_xx=0.2, c_g=0.3),
)
m0 = fbsde.UniformBox(-1.0, 1.0)
rows = {}

def timed(name, fn, repeat):
    fn()  # warm the kernels (compilation, caches)
    best = min(measure(fn) for _ in range(repeat))
    rows[name] = best

def measure(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0

n_fp = 256 if quick else 1024
rng = np.random.default_rng(0)
x = rng.uniform(-1.0, 1.0, (n_fp, 1))
p = rng.uniform(-1.0, 1.0, (n_fp, 1))
timed("fixed_point_phi_n%d" % n_fp, lambda: solve_phi(model, EmpiricalMeasure(x, p)), 3)
timed("fixed_point_an_n%d" % n_fp, lambda: solve_a_n(model, x, p), 3)

M = 32 if quick else 128
S = 50 if quick else 100
paths = fbsde.generate_paths(seed=0, particles=M, steps=S, model=model)
timed("solve_meanfield_m%d_s%d" % (M, S), lambda: fbsde.solve_meanfield(model, m0, paths), 2)
timed("solve_nplayer_n%d_s%d" % (M, S), lambda: fbsde.solve_nplayer(model, m0, paths), 2)

sol = lq.induced_meanfield_solution(model, paths, m0)
timed("fbsde_residual_m%d_s%d" % (M, S), lambda: lq.fbsde_residual(model, sol), 3)

print(json.dumps({"backend": mfglab.BACKEND, "timings": rows}))
"""


def run_backend(backend, quick):
    env = dict(os.environ, MFGLAB_BACKEND=backend)
    code = WORKER.replace("__QUICK__", repr(quick))
    out = subprocess.run(
        [sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout.splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = parser.parse_args()

    results = {}
    for backend in ("numba", "numpy"):
        print("running backend %r ..." % backend, flush=True)
        results[backend] = run_backend(backend, args.quick)
        assert results[backend]["backend"] == backend, results[backend]

    names = list(results["numba"]["timings"])
    width = max(len(n) for n in names)
    print()
    print("%-*s  %10s  %10s  %8s" % (width, "workload", "numba [s]", "numpy [s]", "speedup"))
    for name in names:
        tn = results["numba"]["timings"][name]
        tp = results["numpy"]["timings"][name]
        print("%-*s  %10.4f  %10.4f  %7.1fx" % (width, name, tn, tp, tp / tn))


if __name__ == "__main__":
    main()
