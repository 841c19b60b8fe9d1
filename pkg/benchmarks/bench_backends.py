#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Runs the hot kernels (trilinear sampling + adjoints, ray/capsule
intersection, row-deterministic gemm) and one full training step under
both backends and prints a timing table.  Select a single backend up
front with SEMHUM_BACKEND=numpy|numba; by default both are compared.
"""
import argparse
import time

import numpy as np

from semhum import backend
from semhum import trainer as tr
from semhum.gradcheck import micro_dataset
from semhum.losses import LossWeights
from semhum.params import FieldParams


def timeit(fn, repeat=5, warmup=1):
    for _ in range(warmup):
        fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_kernels(rng):
    k = backend.kernels()
    vol = rng.normal(size=(5, 32, 32, 32))
    pts = rng.uniform(-0.2, 1.2, size=(65536, 3))
    origin = np.zeros(3)
    step = np.full(3, 1 / 31)
    out, i0, frac, inside = k.trilinear_forward(vol, pts, origin, step)
    gout = rng.normal(size=out.shape)

    seg_a = rng.normal(size=(4, 3)) * 0.3
    seg_b = seg_a + rng.normal(size=(4, 3)) * 0.5
    radii = rng.uniform(0.05, 0.2, size=4)
    orig = np.tile([0.0, 0.1, -2.5], (4096, 1))
    dirs = rng.normal(size=(4096, 3)) * np.array([0.3, 0.3, 0.05]) + np.array([0, 0, 1.0])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    a = rng.normal(size=(65536, 167))
    b = rng.normal(size=(167, 128))

    return {
        "trilinear_forward 65k pts": timeit(
            lambda: k.trilinear_forward(vol, pts, origin, step)
        ),
        "trilinear_backward_vol": timeit(
            lambda: k.trilinear_backward_vol(gout, i0, frac, inside, vol.shape)
        ),
        "trilinear_backward_pts": timeit(
            lambda: k.trilinear_backward_pts(gout, vol, i0, frac, inside, 1 / step)
        ),
        "capsule_hits 4k rays": timeit(
            lambda: k.capsule_hits(orig, dirs, seg_a, seg_b, radii)
        ),
        "gemm_rows 65k x 167 x 128": timeit(lambda: k.gemm_rows(a, b), repeat=3),
    }


def bench_train_step():
    ds = micro_dataset(size=24, n_frames=4)
    cfg = tr.TrainConfig(
        iterations=10, rays_per_batch=128, parsing_delay_iters=0,
        nonrigid_enable_iter=0, d_samples=32, eval_every=0,
        surface_samples_per_bone=8, volume_resolution=32,
    )
    params = FieldParams(ds.scene.skeleton, num_frames=len(ds.frames), seed=0)
    opt = tr.AdamState()
    w = LossWeights()
    it = [0]

    def step():
        batch = tr.sample_ray_batch(ds, cfg.rays_per_batch, cfg.seed, it[0])
        tr.train_step(params, batch, w, cfg, it[0], opt)
        it[0] += 1

    return {"train_step 128 rays x 32 samples": timeit(step, repeat=5, warmup=2)}


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--backends", nargs="+", default=None,
                        help="subset of backends to run (default: all available)")
    args = parser.parse_args()
    names = args.backends or (["numpy", "numba"] if backend.HAS_NUMBA else ["numpy"])

    results = {}
    for name in names:
        backend.use(name)
        rng = np.random.default_rng(0)
        rows = bench_kernels(rng)
        rows.update(bench_train_step())
        results[name] = rows

    keys = list(next(iter(results.values())))
    width = max(len(k) for k in keys) + 2
    header = "kernel".ljust(width) + "".join(n.rjust(14) for n in names)
    if len(names) == 2:
        header += "speedup".rjust(10)
    print(header)
    print("-" * len(header))
    for key in keys:
        line = key.ljust(width)
        for n in names:
            line += f"{results[n][key] * 1000:11.2f} ms"
        if len(names) == 2:
            line += f"{results[names[0]][key] / results[names[1]][key]:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
