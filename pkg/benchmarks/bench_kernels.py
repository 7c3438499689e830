"""Timing comparison of the numba kernels against their numpy fallbacks.

Run from the repository root after installing the package:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --batch 16384 --repeats 9

Both backends are imported side by side, so the MZIMODEL_BACKEND flag is
irrelevant here. First numba calls trigger JIT compilation; a warm-up call
per kernel keeps that out of the timings.
"""

import argparse
import time

import numpy as np

from mzimodel import mesh, network
from mzimodel._kernels import am_numba, am_numpy, mlp_numba, mlp_numpy


def am_case(batch, seed=0):
    rng = np.random.default_rng(seed)
    ptr, mzi, sign = mesh.default_topology().csr()
    v2 = rng.uniform(0.0, mesh.V_MAX, (batch, 9)) ** 2
    alpha_k = rng.uniform(0.2, 0.9, 9)
    phi0 = rng.uniform(0.0, 2.0 * np.pi, 9)
    phi2 = rng.normal(0.5, 0.2, (9, 9))
    args = (v2, alpha_k, 2000.0, phi0, phi2, ptr, mzi, sign)
    target = am_numpy.weights_db(*args, np.zeros_like(v2), mesh.DB_FLOOR)[0]
    return args, target


def mlp_case(batch, seed=0):
    rng = np.random.default_rng(seed)
    net = network.init_params(network.Hyperparams(83, 131), seed=seed)
    X = rng.uniform(-1.0, 1.0, (batch, 9))
    T = rng.normal(-10.0, 3.0, (batch, 9))
    return (X, T) + tuple(np.ascontiguousarray(w) for w in net.weights())


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=4096,
                    help="records per kernel call (default 4096)")
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats, best is kept (default 5)")
    args = ap.parse_args()

    am_args, am_target = am_case(args.batch)
    X, T, W1, b1, W2, b2, W3, b3 = mlp_case(args.batch)
    zeros = np.zeros_like(am_args[0])

    cases = [
        ("am weights_db",
         lambda: am_numpy.weights_db(*am_args, zeros, mesh.DB_FLOOR),
         lambda: am_numba.weights_db(*am_args, zeros, mesh.DB_FLOOR)),
        ("am fit_ss_grad",
         lambda: am_numpy.fit_ss_grad(am_args[0], am_target, *am_args[1:]),
         lambda: am_numba.fit_ss_grad(am_args[0], am_target, *am_args[1:])),
        ("mlp forward",
         lambda: mlp_numpy.forward(X, W1, b1, W2, b2, W3, b3),
         lambda: mlp_numba.forward(X, W1, b1, W2, b2, W3, b3)),
        ("mlp fit_ss_grad",
         lambda: mlp_numpy.fit_ss_grad(X, T, W1, b1, W2, b2, W3, b3),
         lambda: mlp_numba.fit_ss_grad(X, T, W1, b1, W2, b2, W3, b3)),
    ]

    print(f"batch={args.batch} repeats={args.repeats} (best-of)")
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, np_fn, nb_fn in cases:
        nb_fn()                                    # JIT warm-up
        t_np = best_of(np_fn, args.repeats) * 1e3
        t_nb = best_of(nb_fn, args.repeats) * 1e3
        print(f"{name:<16} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
