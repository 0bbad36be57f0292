"""Benchmark the numba-jitted convolution kernels against the pure-numpy
fallback on training-representative shapes.

Run: python benchmarks/bench_kernels.py [--repeats N]

The same comparison can be forced package-wide with BITRUNET_BACKEND=numpy.
"""

import argparse
import time

import numpy as np

from bitrunet import kernels
from bitrunet.backend import HAS_NUMBA

CASES = [
    # (label, batch, cin, cout, spatial, stride)
    ("init conv 4->16 @32^3 s1", 1, 4, 16, 32, 1),
    ("fuse conv 32->16 @32^3 s1", 1, 32, 16, 32, 1),
    ("down conv 16->32 @16^3 s2", 1, 16, 32, 16, 2),
    ("deep conv 64->128 @8^3 s2", 1, 64, 128, 8, 2),
]


def timed(fn, repeats):
    fn()  # warm-up / jit compile
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not HAS_NUMBA:
        print("numba is not installed; only the numpy flavor will run")

    rng = np.random.default_rng(0)
    header = f"{'case':28s} {'path':18s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s}"
    print(header)
    print("-" * len(header))
    for label, n, cin, cout, s, stride in CASES:
        x = rng.standard_normal((n, cin, s, s, s)).astype(np.float32)
        w = rng.standard_normal((cout, cin, 3, 3, 3)).astype(np.float32)
        out_s = kernels.conv_out_size(s, 3, stride, 1)
        gy = rng.standard_normal((n, cout, out_s, out_s, out_s)).astype(np.float32)

        rows = [
            ("forward",
             lambda: kernels.conv3d_forward_np(x, w, stride, 1),
             lambda: kernels.conv3d_forward_nb(x, w, stride, 1)),
            ("input grad",
             lambda: kernels.conv3d_input_grad_np(gy, w, stride, 1, (s, s, s)),
             lambda: kernels.conv3d_input_grad_nb(gy, w, stride, 1, (s, s, s))),
            ("weight grad",
             lambda: kernels.conv3d_weight_grad_np(x, gy, stride, 1, (3, 3, 3)),
             lambda: kernels.conv3d_weight_grad_nb(x, gy, stride, 1, (3, 3, 3))),
        ]
        for path, np_fn, nb_fn in rows:
            t_np = timed(np_fn, args.repeats)
            if HAS_NUMBA:
                t_nb = timed(nb_fn, args.repeats)
                print(f"{label:28s} {path:18s} {t_np:9.2f} {t_nb:9.2f} {t_np / t_nb:7.1f}x")
            else:
                print(f"{label:28s} {path:18s} {t_np:9.2f} {'-':>9s} {'-':>8s}")
            label = ""


if __name__ == "__main__":
    main()
