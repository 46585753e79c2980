"""Time the numba kernels against the pure-numpy fallback.

Both implementation modules are imported directly, so one process can
benchmark the pair side by side regardless of RESMAP_BACKEND.  The
numba functions are called once before timing to exclude JIT
compilation.

    python3 benchmarks/bench_backends.py [--size 64] [--repeat 20]
"""

import argparse
import time

import numpy as np

from resmap import _kernels_numba as nb
from resmap import _kernels_numpy as np_impl
from resmap.field import _d8_receivers


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(size, seed=0):
    g = np.random.default_rng(seed)
    x = g.standard_normal((16, size, size)).astype(np.float32)
    k = g.standard_normal((16, 16, 3, 3)).astype(np.float32) * 0.1
    gout = g.standard_normal((16, size, size)).astype(np.float32)
    pooled, idx = np_impl.maxpool2x_forward(x)
    gp = g.standard_normal(pooled.shape).astype(np.float32)
    up = g.standard_normal((16, 2 * size, 2 * size)).astype(np.float32)

    height = g.standard_normal((2 * size, 2 * size)).astype(np.float32)
    recv = _d8_receivers(height, 1.0)
    order = np.argsort(height.ravel())[::-1].astype(np.int64)

    return [
        ("conv2d_forward",
         lambda m: m.conv2d_forward(x, k, 1, 1)),
        ("conv2d_backward_input",
         lambda m: m.conv2d_backward_input(gout, k, x.shape, 1, 1)),
        ("conv2d_backward_kernel",
         lambda m: m.conv2d_backward_kernel(gout, x, k.shape, 1, 1)),
        ("maxpool2x_forward",
         lambda m: m.maxpool2x_forward(x)),
        ("maxpool2x_backward",
         lambda m: m.maxpool2x_backward(gp, idx)),
        ("upsample2x_forward",
         lambda m: m.upsample2x_forward(x)),
        ("upsample2x_backward",
         lambda m: m.upsample2x_backward(up)),
        ("flow_accumulate",
         lambda m: m.flow_accumulate(order, recv)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64,
                    help="spatial extent of the conv/pool inputs (default 64)")
    ap.add_argument("--repeat", type=int, default=20,
                    help="timing repeats, best is reported (default 20)")
    args = ap.parse_args()

    cases = make_cases(args.size)
    for _name, fn in cases:  # trigger JIT compilation outside the timers
        fn(nb)

    print(f"kernel benchmark, {args.size}x{args.size} tiles, "
          f"best of {args.repeat}")
    print(f"{'kernel':<24} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, fn in cases:
        t_np = best_of(lambda: fn(np_impl), args.repeat)
        t_nb = best_of(lambda: fn(nb), args.repeat)
        print(f"{name:<24} {t_np * 1e3:>8.3f}ms {t_nb * 1e3:>8.3f}ms "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
