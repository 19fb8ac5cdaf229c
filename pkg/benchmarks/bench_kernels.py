"""Compare the numba and pure-numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The library picks a backend at import time; set BITSNN_DISABLE_NUMBA=1 to
force the numpy path. This script calls both backends directly so one run
shows both columns. Backward convolutions share one BLAS-backed
implementation, so they are not listed.
"""
import argparse
import time

import numpy as np

from bitsnn import _kernels as K


def _best(fn, repeat):
    fn()  # warm-up (triggers JIT compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    xp = rng.standard_normal((32, 16, 18, 18)).astype(np.float32)
    w = rng.standard_normal((32, 16, 3, 3)).astype(np.float32)
    u = rng.uniform(-0.5, 1.5, (32, 32, 16, 16)).astype(np.float32)
    z = rng.uniform(-0.2, 1.2, (8, 32, 32, 16, 16)).astype(np.float32)
    return {
        "conv2d forward": lambda b: b["conv2d_forward"](xp, w, 1, 16, 16),
        "fire modified (T=4)": lambda b: b["fire_modified"](u.copy(), 1.0, 4),
        "fire baseline (T=8)": lambda b: b["fire_baseline"](z, 1.0, 0.5),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    names = [n for n in ("numpy", "numba") if n in K.BACKENDS]
    print(f"{'kernel':<22}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label, fn in cases(rng).items():
        t = [_best(lambda: fn(K.BACKENDS[n]), args.repeat) for n in names]
        row = f"{label:<22}" + "".join(f"{v * 1e3:>10.2f}ms" for v in t)
        if len(t) == 2:
            row += f"{t[0] / t[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
