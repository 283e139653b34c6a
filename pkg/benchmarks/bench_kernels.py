"""Compiled vs pure-Python kernels.

Runs the same workload (fast marching on a 2D double well, a fan of
geodesic traces and the amplitude transport) once per backend in a fresh
interpreter, with SEMITUNNEL_NUMBA selecting the path.  The numba run is
timed after a warm-up call so compilation is not counted.

    python3 benchmarks/bench_kernels.py [--n 81]
"""

import argparse
import json
import os
import subprocess
import sys

WORKLOAD = r"""
import json, sys, time
import numpy as np
from semitunnel import kernels
from semitunnel.agmon import fast_march, trace_geodesics
from semitunnel.asymptotics import transport_amplitude
from semitunnel.mesh import DomainSpec, build_domain
from semitunnel.potential import evaluate_field, find_wells

n = int(sys.argv[1])
expr = "(x^2 - 1)^2 + y^2"
g = build_domain(DomainSpec("rectangle", ((-2, 2), (-1.5, 1.5)), (n, n)))
V = evaluate_field(expr, g)
wells = find_wells(V, g)

def run():
    t = {}
    s = time.perf_counter()
    f = [fast_march(g, V, w) for w in wells]
    t["fast_march"] = time.perf_counter() - s
    starts = g.coords[np.flatnonzero(f[0].d < f[1].d)[::7]]
    s = time.perf_counter()
    trace_geodesics(f[0], starts, strict=False)
    t["trace"] = time.perf_counter() - s
    s = time.perf_counter()
    transport_amplitude(f[0], potential=expr, others=[f[1]], max_traces=100)
    t["transport"] = time.perf_counter() - s
    return t

if kernels.BACKEND == "numba":
    run()
print(json.dumps({"backend": kernels.BACKEND, "times": run()}))
"""


def run_backend(flag: str, n: int) -> dict:
    env = dict(os.environ, SEMITUNNEL_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", WORKLOAD, str(n)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=81, help="grid nodes per axis")
    args = ap.parse_args(argv)
    py = run_backend("0", args.n)
    nb = run_backend("1", args.n)
    print(f"grid {args.n} x {args.n}")
    print(f"{'kernel':<12} {'python [s]':>12} {nb['backend'] + ' [s]':>12} {'speed-up':>10}")
    for k in py["times"]:
        a, b = py["times"][k], nb["times"][k]
        print(f"{k:<12} {a:12.3f} {b:12.4f} {a / b if b > 0 else float('inf'):10.1f}")


if __name__ == "__main__":
    main()
