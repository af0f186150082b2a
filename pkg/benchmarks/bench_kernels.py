"""Time the numpy fallback against the compiled core on the per-trial kernels.

    python benchmarks/bench_kernels.py --repeats 200
"""
from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from pfguide import instances as I
from pfguide._core import available_backends, get_backend
from pfguide.oracle import coverage_constants


def _cases(N: int):
    tree = I.random_tree(8, 2, 1)
    lower = I.build_smc_lower(32, 1.0, "counts")
    eta = coverage_constants(tree, []).c_act_hat
    return [
        ("smc", tree, lambda k, fc, rng: k.smc(fc, N, False, rng)),
        ("smc-systematic", tree, lambda k, fc, rng: k.smc(fc, N, True, rng)),
        ("smc-rs", tree, lambda k, fc, rng: k.smc_rs(fc, N, eta, 10**8, rng)),
        ("dmc", tree, lambda k, fc, rng: k.dmc(fc, N, False, rng)),
        ("rollouts", tree, lambda k, fc, rng: k.rollouts(fc, N, True, rng)),
        ("smc-lower-H32", lower, lambda k, fc, rng: k.smc(fc, N, False, rng)),
    ]


def _time(fn, kernels, fc, repeats: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    fn(kernels, fc, rng)  # warm caches
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(kernels, fc, rng)
    return (time.perf_counter() - t0) / repeats


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, nargs="+", default=[4, 64])
    ap.add_argument("--repeats", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    a = ap.parse_args(argv)

    names = available_backends()
    if "cython" not in names:
        print("compiled core not built; only the fallback can be timed", file=sys.stderr)
    results = []
    print(f"{'kernel':<16}{'N':>6}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speedup':>10}")
    for N in a.particles:
        for label, inst, fn in _cases(N):
            fc = inst.flat
            t = {n: _time(fn, get_backend(n), fc, a.repeats, a.seed) for n in names}
            speed = t["python"] / t["cython"] if "cython" in t else float("nan")
            results.append({"kernel": label, "N": N, **{f"{n}_s": v for n, v in t.items()}, "speedup": speed})
            print(f"{label:<16}{N:>6}" + "".join(f"{t[n] * 1e6:>14.1f}" for n in names) + f"{speed:>10.1f}")
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
