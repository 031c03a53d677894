"""Time the rasterizer kernels under numba and under the numpy fallback.

    python3 benchmarks/bench_kernels.py [--disks 5000] [--size 128] [--repeat 3]

Both backends run on the same random scene; the first numba call (JIT or
cache load) is reported separately from the steady-state timing.
"""

import argparse
import time

import numpy as np

from gaussianize import rasterizer
from gaussianize._accel import NUMBA_AVAILABLE
from gaussianize.camera import Camera
from gaussianize.gaussians import GaussianSet
from gaussianize.kernels import _numpy


def scene(m, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(m, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    q = rng.normal(size=(m, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = np.full((m, 2), 2.0 / np.sqrt(m))
    return GaussianSet(p * 0.5, q, s, rng.uniform(0.3, 0.95, m), rng.uniform(0, 1, (m, 3)))


def timed(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run(backend, g, cam, dl, repeat):
    rasterizer.impl = backend
    mask = np.ones((cam.height, cam.width), bool)
    ops = {
        "forward": lambda: rasterizer.render(g, cam),
        "backward": lambda: rasterizer.render_backward(g, cam, dl),
        "select": lambda: rasterizer.select_first_hit(g, cam, mask),
    }
    return {k: timed(f, repeat) for k, f in ops.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--disks", type=int, default=5000)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    g = scene(args.disks)
    cam = Camera.look_at([1.6, -1.2, 0.9], width=args.size, height=args.size)
    dl = np.random.default_rng(1).normal(size=(args.size, args.size, 3))
    print(f"{args.disks} disks, {args.size}x{args.size} pixels, best of {args.repeat}")

    results = {"numpy": run(_numpy, g, cam, dl, args.repeat)}
    if NUMBA_AVAILABLE:
        from gaussianize.kernels import _numba

        t = time.perf_counter()
        run(_numba, g, cam, dl, 1)
        print(f"numba first call (compile or cache load): {time.perf_counter() - t:.2f} s")
        results["numba"] = run(_numba, g, cam, dl, args.repeat)

    print(f"{'kernel':<10}" + "".join(f"{b:>12}" for b in results) + ("     speedup" if len(results) > 1 else ""))
    for op in results["numpy"]:
        row = f"{op:<10}" + "".join(f"{results[b][op]:>11.3f}s" for b in results)
        if "numba" in results:
            row += f"{results['numpy'][op] / results['numba'][op]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
