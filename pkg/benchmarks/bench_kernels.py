"""Timing comparison of the compiled and pure-Python ray-casting kernels.

Run:  python benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from latnav.kernels import BACKEND, cast_rays_cy, cast_rays_py
from latnav.world import N_RAYS, RAY_FOV, RAY_MAX, build_scene


def make_case(seed: int):
    m = build_scene("aisles", seed)
    rng = np.random.default_rng(seed)
    x0, y0 = 12.0 + rng.uniform(-4, 4), 12.0 + rng.uniform(-4, 4)
    angles = rng.uniform(-np.pi, np.pi) + np.linspace(-RAY_FOV / 2, RAY_FOV / 2, N_RAYS)
    ped_xy = rng.uniform(2, 22, size=(10, 2))
    ped_r = np.full(10, 0.3)
    return (m.occupancy, m.resolution, x0, y0, angles, RAY_MAX, ped_xy, ped_r)


def bench(fn, cases, repeats: int = 200) -> float:
    fn(*cases[0])  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        for case in cases:
            fn(*case)
    return (time.perf_counter() - t0) / (repeats * len(cases))


def main():
    cases = [make_case(s) for s in range(5)]
    t_py = bench(cast_rays_py, cases)
    print(f"python kernel:  {t_py * 1e6:8.1f} us / sense")
    cy = cast_rays_cy()
    if cy is None:
        print("compiled kernel: not available")
        return
    for a, b in zip(cast_rays_py(*cases[0]), cy(*cases[0])):
        assert abs(a - b) < 1e-12, "kernel outputs disagree"
    t_cy = bench(cy, cases)
    print(f"compiled kernel:{t_cy * 1e6:8.1f} us / sense")
    print(f"speedup: {t_py / t_cy:.1f}x (active backend: {BACKEND})")


if __name__ == "__main__":
    main()
