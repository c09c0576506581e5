"""Wall time of the Euler-Maruyama kernels: compiled (numba) against pure numpy.

    python3 benchmarks/bench_euler.py [--M 20000] [--K 5000] [--steps 128] [--repeat 5]
"""

import argparse
import time

import numpy as np

from mfbellman import kernels
from mfbellman.coefficients import random_sine_params


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--M", type=int, default=20_000)
    ap.add_argument("--K", type=int, default=5_000)
    ap.add_argument("--steps", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    params = random_sine_params(rng, 1.0)
    h = 1.0 / args.steps
    x0, y0 = rng.normal(size=args.M), rng.normal(size=args.K)
    u2 = rng.uniform(-1, 1, (args.M, args.steps))
    u1 = rng.uniform(-1, 1, (args.K, args.steps))
    dB2 = rng.normal(0, np.sqrt(h), (args.M, args.steps))
    dB1 = rng.normal(0, np.sqrt(h), (args.K, args.steps))

    backends = ["numpy"] + (["numba"] if kernels.NUMBA_AVAILABLE else [])
    results = {}
    for b in backends:
        def run(b=b):
            X, feats = kernels.run_meanfield(params, 0.0, h, 0, x0, u2, dB2, backend=b)
            return X, kernels.run_individual(params, 0.0, h, 0, y0, u1, dB1, feats, backend=b)
        out = run()  # warm-up (compilation for numba)
        results[b] = (best_of(run, args.repeat), out)

    print(f"M={args.M} K={args.K} steps={args.steps}")
    for b, (sec, _) in results.items():
        print(f"{b:>6}: {sec * 1e3:9.2f} ms")
    if len(results) == 2:
        (Xa, Ya), (Xb, Yb) = results["numpy"][1], results["numba"][1]
        diff = max(np.max(np.abs(Xa - Xb)), np.max(np.abs(Ya - Yb)))
        print(f"speed-up {results['numpy'][0] / results['numba'][0]:.1f}x, max |numpy - numba| = {diff:.2e}")
    else:
        print("numba not installed; only the numpy path was timed")


if __name__ == "__main__":
    main()
