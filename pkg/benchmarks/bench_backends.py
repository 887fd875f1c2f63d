"""Timing comparison of the numpy and numba kernel backends.

Runs each kernel in a subprocess (the backend is chosen at import time from
the METALORA_NUMBA env var) and reports per-call wall time after warm-up.

Usage: python3 benchmarks/bench_backends.py [--reps 2000] [--size 64]
"""

import argparse
import json
import subprocess
import sys

WORKER = """
import json, os, sys, time
import numpy as np
from metalora import kernels

reps = int(sys.argv[1])
n = int(sys.argv[2])
rng = np.random.default_rng(0)
d1, d2, r1, r2, batch = n, n, max(1, n // 4), 1, 4
w0 = rng.standard_normal((d2, d1))
lmd = rng.standard_normal((r1, d1))
lm = rng.standard_normal((r2, r1))
lu = rng.standard_normal((d2, r2))
x = rng.standard_normal((d1, batch))
g = rng.standard_normal((d2, batch))
p = rng.standard_normal((d2, d1))
gr = rng.standard_normal((d2, d1))
m = np.zeros((d2, d1)); v = np.zeros((d2, d1))

def bench(fn, warmup=5):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps

t_compile0 = time.perf_counter()
h, u, mid = kernels.chain_forward(w0, lmd, lm, lu, 1.0, x)
t_first = time.perf_counter() - t_compile0

out = {
    "backend": kernels.backend_name(),
    "first_call_s": t_first,
    "chain_forward_us": 1e6 * bench(lambda: kernels.chain_forward(w0, lmd, lm, lu, 1.0, x)),
    "chain_backward_us": 1e6 * bench(lambda: kernels.chain_backward(w0, lmd, lm, lu, 1.0, x, u, mid, g)),
    "adamw_update_us": 1e6 * bench(lambda: kernels.adamw_update(p, gr, m, v, 1, 1e-3, 0.9, 0.999, 1e-8, 0.0)),
}
print(json.dumps(out))
"""


def run(numba: bool, reps: int, size: int) -> dict:
    env = {"METALORA_NUMBA": "1" if numba else "0"}
    import os
    full_env = dict(os.environ, **env)
    proc = subprocess.run([sys.executable, "-c", WORKER, str(reps), str(size)],
                          capture_output=True, text=True, env=full_env)
    if proc.returncode != 0:
        raise RuntimeError(proc.stderr)
    return json.loads(proc.stdout)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()
    rows = [run(False, args.reps, args.size), run(True, args.reps, args.size)]
    print(f"{'backend':<10}{'first call':>12}{'fwd us':>10}{'bwd us':>10}{'adamw us':>10}")
    for r in rows:
        print(f"{r['backend']:<10}{r['first_call_s']:>11.3f}s"
              f"{r['chain_forward_us']:>10.2f}{r['chain_backward_us']:>10.2f}"
              f"{r['adamw_update_us']:>10.2f}")
    print("\nfirst call includes JIT compilation for the numba backend "
          "(disk-cached afterwards).")


if __name__ == "__main__":
    main()
