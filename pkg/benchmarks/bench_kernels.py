"""Compare the compiled and pure-numpy kernel backends.

Each backend runs in its own interpreter (the backend is fixed at import
time by MFLDP_BACKEND).  Reports best-of-n wall time per kernel after one
warm-up call, and the largest difference between the two backends' outputs.

    python benchmarks/bench_kernels.py [--repeat 3]
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile
import time

WORKER = r"""
import json, sys, time
import numpy as np
from mfldp import kernels
from mfldp.models import csma_model, const2_model
from mfldp.action import solve_slices

repeat = int(sys.argv[1]); out = sys.argv[2]
m = csma_model(4)
rng = np.random.Generator(np.random.Philox(0))
mus = rng.dirichlet(np.ones(4), size=20000)
starts = rng.dirichlet(np.ones(4), size=200)
vels = rng.standard_normal((2000, 4)) * 0.2
vels -= vels.mean(axis=1, keepdims=True)
p = m.program
c2 = const2_model().program

def ssa():
    counts = np.array([100, 100], dtype=np.int64)
    u = np.random.Generator(np.random.Philox(1)).random(40000)
    rt = np.empty(20000); re = np.empty(20000, dtype=np.int64)
    kernels.ssa_run(*c2, counts, 200, 0.0, 1e9, u, 0, rt, re, 0)
    return rt

cases = {
    "rates_batch": lambda: kernels.rates_batch(p.code, p.args, p.offsets, p.max_stack, mus),
    "drift_batch": lambda: kernels.drift_batch(*p, mus),
    "rk4_endpoints": lambda: kernels.rk4_endpoints(*p, starts, 0.01, 500, 1e-6, 20),
    "slice_solve": lambda: solve_slices(m, mus[:2000], vels)["cost"],
    "ssa_20k_events": ssa,
}
timings, outputs = {}, {}
for name, fn in cases.items():
    res = fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter(); fn(); best = min(best, time.perf_counter() - t)
    timings[name] = best
    outputs[name] = np.asarray(res, dtype=float)
np.savez(out, **outputs)
print(json.dumps({"backend": kernels.BACKEND, "timings": timings}))
"""


def run(backend, repeat, out):
    env = dict(os.environ, MFLDP_BACKEND=backend)
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat), out], env=env, check=True,
                          capture_output=True, text=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    import numpy as np

    with tempfile.TemporaryDirectory() as tmp:
        fast = run("numba", args.repeat, os.path.join(tmp, "numba.npz"))
        slow = run("numpy", args.repeat, os.path.join(tmp, "numpy.npz"))
        a = np.load(os.path.join(tmp, "numba.npz"))
        b = np.load(os.path.join(tmp, "numpy.npz"))
        print(f"{'kernel':<16}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}{'max diff':>12}")
        for name in fast["timings"]:
            tf, ts = fast["timings"][name], slow["timings"][name]
            x, y = a[name], b[name]
            finite = np.isfinite(x) & np.isfinite(y)
            diff = float(np.max(np.abs(x[finite] - y[finite]))) if finite.any() else 0.0
            print(f"{name:<16}{tf * 1e3:>10.2f}ms{ts * 1e3:>10.2f}ms{ts / tf:>9.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    start = time.perf_counter()
    main()
    print(f"total {time.perf_counter() - start:.1f}s")
