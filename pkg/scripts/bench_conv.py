#!/usr/bin/env python3
"""Micro-benchmark: tap-ordered deterministic convolution vs im2col/GEMM.

The deterministic path is the correctness reference (bit-identical to the
naive loop); the fast path trades that guarantee for BLAS throughput. This
prints a small table so the trade-off is measurable rather than assumed.
"""

import sys
import time

import numpy as np

from dnet.convops import ConvKernel, conv2d, same_pads, using_deterministic
from dnet.tensor import tensor

CASES = [
    # (height, width, cin, cout, k, dilation)
    (64, 64, 8, 8, 3, 1),
    (32, 32, 32, 32, 3, 1),
    (16, 16, 64, 64, 3, 1),
    (4, 4, 256, 256, 3, 2),
    (64, 64, 3, 32, 3, 1),
]


def time_forward(x, kern, deterministic: bool, repeats: int = 10) -> float:
    with using_deterministic(deterministic):
        conv2d(x, kern)  # warm up
        t0 = time.perf_counter()
        for _ in range(repeats):
            conv2d(x, kern)
        return (time.perf_counter() - t0) / repeats


def main() -> int:
    rng = np.random.default_rng(0)
    print(f"{'case':>26} {'det ms':>9} {'fast ms':>9} {'speedup':>8} {'max diff':>10}")
    for h, w, cin, cout, k, d in CASES:
        x = tensor(rng.normal(size=(1, h, w, cin)))
        kern = ConvKernel(
            tensor(rng.normal(size=(k, k, cin, cout))),
            tensor(rng.normal(size=(1, 1, 1, cout))),
            1, d, same_pads(k, d),
        )
        with using_deterministic(True):
            ref = conv2d(x, kern).data
        with using_deterministic(False):
            fast = conv2d(x, kern).data
        diff = float(np.abs(ref - fast).max())
        t_det = time_forward(x, kern, True)
        t_fast = time_forward(x, kern, False)
        label = f"{h}x{w}x{cin}->{cout} k{k} d{d}"
        print(
            f"{label:>26} {t_det * 1e3:9.2f} {t_fast * 1e3:9.2f} "
            f"{t_det / t_fast:8.1f} {diff:10.2e}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
