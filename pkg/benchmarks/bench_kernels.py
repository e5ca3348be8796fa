#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs each hot kernel on a representative workload and prints a timing table.
Both implementations are imported directly, so this works regardless of the
VOXSPLAT_NO_NUMBA setting (the numba rows are skipped when numba is absent).

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from voxsplat import _kernels as K


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_dda(repeat):
    rng = np.random.default_rng(0)
    n = 20_000
    origins = rng.uniform(-2, 2, (n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tmins = np.zeros(n)
    tmaxs = rng.uniform(0.5, 2.0, n)

    rows = []
    if K.NUMBA_ENABLED:
        K._dda_batch_loop(origins[:10], dirs[:10], tmins[:10], tmaxs[:10], 0.05)
        rows.append(("dda_batch", "numba",
                     timeit(lambda: K._dda_batch_loop(origins, dirs, tmins, tmaxs, 0.05),
                            repeat)))
    rows.append(("dda_batch", "numpy",
                 timeit(lambda: K._dda_batch_numpy(origins, dirs, tmins, tmaxs, 0.05),
                        repeat)))
    return rows


def bench_blend(repeat):
    rng = np.random.default_rng(1)
    n_vox, n_events = 50_000, 1_000_000
    vrows = rng.integers(0, n_vox, n_events)
    phis = rng.uniform(-0.07, 0.07, n_events)

    def run(fn):
        weight = np.zeros(n_vox)
        tsdf = np.full(n_vox, 0.07)
        fn(vrows, phis, weight, tsdf, 64.0, True)

    rows = []
    if K.NUMBA_ENABLED:
        run(K._blend_events_loop)  # compile
        rows.append(("blend_events", "numba",
                     timeit(lambda: run(K._blend_events_loop), repeat)))
    rows.append(("blend_events", "numpy",
                 timeit(lambda: run(K._blend_events_numpy), max(1, repeat // 2))))
    return rows


def bench_rasterize(repeat):
    rng = np.random.default_rng(2)
    n, width, height = 2_000, 320, 240
    means2d = rng.uniform([0, 0], [width, height], (n, 2))
    conics = np.zeros((n, 3))
    radii = np.zeros(n)
    for i in range(n):
        a = rng.normal(size=(2, 2)) * 2.0
        cov = a @ a.T + 0.3 * np.eye(2)
        inv = np.linalg.inv(cov)
        conics[i] = (inv[0, 0], inv[0, 1], inv[1, 1])
        radii[i] = np.ceil(3.0 * np.sqrt(np.linalg.eigvalsh(cov).max())) + 1
    depths = np.sort(rng.uniform(0.5, 4.0, n))
    opac = rng.uniform(0.1, 0.9, n)
    colors = rng.uniform(0, 1, (n, 3))
    x0 = np.clip(np.floor(means2d[:, 0] - radii), 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(means2d[:, 0] + radii) + 1, 0, width).astype(np.int64)
    y0 = np.clip(np.floor(means2d[:, 1] - radii), 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(means2d[:, 1] + radii) + 1, 0, height).astype(np.int64)
    bboxes = np.stack([x0, x1, y0, y1], axis=1)
    bg = np.array([0.5, 0.5, 0.5])

    rows = []
    if K.NUMBA_ENABLED:
        tile_start, tile_gauss, tiles_x = K._tile_bin(bboxes, n, height, width)
        K._rasterize_tiles_loop(means2d, conics, depths, opac, colors, height,
                                width, bg, tile_start, tile_gauss, tiles_x, True)

        def run_numba():
            ts, tg, tx = K._tile_bin(bboxes, n, height, width)
            K._rasterize_tiles_loop(means2d, conics, depths, opac, colors,
                                    height, width, bg, ts, tg, tx, True)

        rows.append(("rasterize", "numba", timeit(run_numba, repeat)))
    rows.append(("rasterize", "numpy",
                 timeit(lambda: K._rasterize_numpy(means2d, conics, depths, opac,
                                                   colors, height, width, bg,
                                                   bboxes, True),
                        max(1, repeat // 2))))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    print(f"numba available: {K.NUMBA_ENABLED}")
    all_rows = []
    for bench in (bench_dda, bench_blend, bench_rasterize):
        all_rows.extend(bench(args.repeat))

    print(f"\n{'kernel':<14} {'path':<7} {'best (ms)':>10}   speedup")
    base = {}
    for kernel, path, seconds in all_rows:
        if path == "numpy":
            base[kernel] = seconds
    for kernel, path, seconds in all_rows:
        speed = base[kernel] / seconds if path == "numba" else 1.0
        print(f"{kernel:<14} {path:<7} {seconds * 1e3:>10.2f}   {speed:>6.1f}x")


if __name__ == "__main__":
    main()
