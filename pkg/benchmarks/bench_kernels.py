#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times im2col / col2im directly and a full conv2d forward+backward through
the autograd op with each backend patched in. Run:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from diffperc import kernels, tensor as T
from diffperc.rng import Rng
from diffperc.tensor import Tensor

SHAPES = [
    # (label, b, cin, cout, side, kernel, stride)
    ("codec 64x64", 8, 3, 24, 64, 3, 2),
    ("unet 8x8", 8, 32, 32, 8, 3, 1),
    ("unet 4x4", 8, 64, 64, 4, 3, 1),
    ("head 16x16", 8, 32, 32, 16, 3, 1),
]


def bench(fn, repeats=20, warmup=3):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_raw(impl, b, c, side, k, stride, repeats=50):
    xp = Rng(0).normal((b, c, side, side))
    oh = (side - k) // stride + 1
    t_im = bench(lambda: impl.im2col(xp, k, k, stride, stride, oh, oh), repeats)
    cols = impl.im2col(xp, k, k, stride, stride, oh, oh)
    t_col = bench(
        lambda: impl.col2im(cols, b, c, side, side, k, k, stride, stride, oh, oh),
        repeats,
    )
    return t_im, t_col


def bench_conv(impl, b, cin, cout, side, k, stride, repeats=20):
    kernels.im2col, kernels.col2im = impl.im2col, impl.col2im
    rng = Rng(1)
    x = Tensor(rng.normal((b, cin, side, side)), requires_grad=True)
    w = Tensor(rng.normal((cout, cin, k, k)), requires_grad=True)
    bias = Tensor(rng.normal((cout,)), requires_grad=True)

    def run():
        x.grad = w.grad = bias.grad = None
        y = T.conv2d(x, w, bias, stride=stride, padding=k // 2)
        T.tsum(y).backward()

    return bench(run, repeats)


def main():
    backends = {}
    for name in ("numpy", "numba"):
        try:
            backends[name] = kernels.load_impl(name)
        except ImportError:
            print(f"{name}: unavailable, skipped")
    original = (kernels.im2col, kernels.col2im)

    print(f"active default backend: {kernels.BACKEND}\n")
    header = f"{'case':<14} {'metric':<10}" + "".join(f"{n:>12}" for n in backends)
    print(header)
    print("-" * len(header))
    for label, b, cin, cout, side, k, stride in SHAPES:
        rows = {"im2col": {}, "col2im": {}, "conv fw+bw": {}}
        for name, impl in backends.items():
            t_im, t_col = bench_raw(impl, b, cin, side, k, stride)
            rows["im2col"][name] = t_im
            rows["col2im"][name] = t_col
            rows["conv fw+bw"][name] = bench_conv(impl, b, cin, cout, side, k, stride)
        for metric, vals in rows.items():
            cells = "".join(f"{vals[n] * 1e3:>10.3f}ms" for n in backends)
            print(f"{label:<14} {metric:<10}{cells}")
        print()
    kernels.im2col, kernels.col2im = original


if __name__ == "__main__":
    main()
