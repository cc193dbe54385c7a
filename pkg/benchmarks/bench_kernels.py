"""Time the numba kernels against their numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 5]

Timings are the best of ``--repeat`` runs after one warm-up call (which
also triggers compilation).
"""

import argparse
import time

import numpy as np

from mtvsr import kernels


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    n = args.size
    y = rng.normal(size=(n, n, n)).astype(np.float32)
    mat = np.array([[0.98, 0.05, 0.0, 0.3], [-0.05, 0.98, 0.0, -0.2], [0.0, 0.0, 1.0, 0.1]])
    x = kernels.pull(y, mat, y.shape)
    w = np.array([1.0, 1.0, 1.0])
    u = rng.normal(size=(12, n ** 3)).astype(np.float32)

    cases = {
        "pull": lambda jit: kernels.pull(y, mat, y.shape, use_jit=jit),
        "push": lambda jit: kernels.push(x, mat, y.shape, use_jit=jit),
        "dtd": lambda jit: kernels.dtd(y, w, use_jit=jit),
        "group_shrink": lambda jit: kernels.group_shrink(u.copy(), 0.5, use_jit=jit),
    }
    print(f"jit enabled: {kernels.JIT_ENABLED}  grid {n}^3")
    print(f"{'kernel':<14}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, fn in cases.items():
        t_jit = _best(lambda: fn(True), args.repeat)
        t_np = _best(lambda: fn(False), args.repeat)
        print(f"{name:<14}{t_jit:>10.4f}{t_np:>10.4f}{t_np / t_jit:>9.1f}")


if __name__ == "__main__":
    main()
