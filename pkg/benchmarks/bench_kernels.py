#!/usr/bin/env python3
"""Benchmark the numpy kernel backend against the compiled extension.

Times the three hot kernels (group quantization, dequantization, packed
matmul in both orientations) on identical inputs and prints median
wall-clock per call plus the speedup. Cross-checks results between the
backends before timing so a fast-but-wrong kernel cannot win.

Usage:
    python3 benchmarks/bench_kernels.py [--rows N] [--cols N]
        [--group-size N] [--iters N] [--m N]
"""

import argparse
import statistics
import sys
import time

import numpy as np

from chunkkv.kernels import _numpy

try:
    from chunkkv.kernels import _core
except ImportError:
    _core = None


def median_time(fn, iters):
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def check_agreement(args, bits):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, args.cols))
    cn, sn, zn = _numpy.quantize_groups(x, bits, args.group_size)
    cc, sc, zc = _core.quantize_groups(x, bits, args.group_size)
    if not (np.array_equal(cn, cc) and np.array_equal(sn, sc) and np.array_equal(zn, zc)):
        raise SystemExit("backend mismatch in quantize_groups; refusing to benchmark")
    packed = _numpy.pack_codes(cn, bits)
    dn = _numpy.dequantize_codes(packed, sn, zn, 64, args.cols, bits, args.group_size)
    dc = _core.dequantize_codes(packed, sn, zn, 64, args.cols, bits, args.group_size)
    if not np.array_equal(dn, dc):
        raise SystemExit("backend mismatch in dequantize_codes; refusing to benchmark")
    a = rng.normal(size=(args.m, 64))
    mn = _numpy.matmul_packed(a, packed, sn, zn, 64, args.cols, bits, args.group_size, False)
    mc = _core.matmul_packed(a, packed, sn, zn, 64, args.cols, bits, args.group_size, False)
    if np.max(np.abs(mn - mc)) > 1e-9 * max(1.0, np.max(np.abs(mn))):
        raise SystemExit("backend mismatch in matmul_packed; refusing to benchmark")


def bench(args, bits):
    rng = np.random.default_rng(1)
    rows, cols, gs, m = args.rows, args.cols, args.group_size, args.m
    x = rng.normal(size=(rows, cols))
    codes, scales, zps = _numpy.quantize_groups(x, bits, gs)
    packed = _numpy.pack_codes(codes, bits)
    q = rng.normal(size=(m, cols))
    w = rng.normal(size=(m, rows))

    cases = [
        ("quantize_groups", lambda mod: lambda: mod.quantize_groups(x, bits, gs)),
        ("dequantize_codes", lambda mod: lambda: mod.dequantize_codes(
            packed, scales, zps, rows, cols, bits, gs)),
        ("matmul_packed qK^T", lambda mod: lambda: mod.matmul_packed(
            q, packed, scales, zps, rows, cols, bits, gs, True)),
        ("matmul_packed aV", lambda mod: lambda: mod.matmul_packed(
            w, packed, scales, zps, rows, cols, bits, gs, False)),
    ]
    out = []
    for name, make in cases:
        t_np = median_time(make(_numpy), args.iters)
        t_c = median_time(make(_core), args.iters)
        out.append((name, bits, t_np, t_c))
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=4096, help="cached tokens (default 4096)")
    p.add_argument("--cols", type=int, default=64, help="head dim (default 64)")
    p.add_argument("--group-size", type=int, default=32, help="default 32")
    p.add_argument("--iters", type=int, default=9, help="timing repeats (default 9)")
    p.add_argument("--m", type=int, default=1, help="query rows per matmul (default 1)")
    args = p.parse_args(argv)

    if _core is None:
        print("compiled backend is not built; nothing to compare "
              "(pip install -e . with a C toolchain)", file=sys.stderr)
        return 1

    rows = []
    for bits in (2, 4):
        check_agreement(args, bits)
        rows.extend(bench(args, bits))

    print(f"kernel timings, rows={args.rows} cols={args.cols} "
          f"group_size={args.group_size} m={args.m}, median of {args.iters}")
    header = f"{'op':<22}{'bits':>5}{'numpy ms':>12}{'compiled ms':>13}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, bits, t_np, t_c in rows:
        ratio = t_np / t_c if t_c > 0 else float("inf")
        print(f"{name:<22}{bits:>5}{t_np * 1e3:>12.3f}{t_c * 1e3:>13.3f}{ratio:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
