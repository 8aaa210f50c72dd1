"""Time the compiled and numpy rasterizer backends on the same scenes.

    python benchmarks/bench_raster.py --gaussians 500 2000 --size 64 --repeat 5
"""

import argparse
import time

import numpy as np

from endosplat import quaternion as quat
from endosplat.render import BACKENDS, render, render_adjoint
from endosplat.scene import Camera, GaussianSet


def make_scene(rng, n, size):
    # a jittered sheet in front of the camera, roughly one Gaussian per few pixels
    xy = rng.uniform(-0.5, 0.5, (n, 2))
    return GaussianSet(
        positions=np.c_[xy, 1.0 + 0.05 * rng.standard_normal(n)],
        scales=np.full((n, 3), 1.5 / np.sqrt(n)),
        rotations=quat.normalize(rng.normal(size=(n, 4))),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        opacities=rng.uniform(0.5, 0.95, n),
    )


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--gaussians", type=int, nargs="+", default=[250, 1000, 2000])
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    cam = Camera(args.size, args.size, (args.size - 1) / 2, (args.size - 1) / 2, args.size, args.size)
    g_color = rng.standard_normal((args.size, args.size, 3))
    g_depth = rng.standard_normal((args.size, args.size))
    print(f"{'backend':>9} {'G':>6} {'forward ms':>11} {'backward ms':>12}")
    results = {}
    for n in args.gaussians:
        scene = make_scene(rng, n, args.size)
        for name in sorted(BACKENDS):
            out = render(scene, cam, backend=name)
            fwd = best_of(lambda: render(scene, cam, backend=name), args.repeat)
            bwd = best_of(lambda: render_adjoint(scene, cam, g_color, g_depth, output=out), args.repeat)
            results[name, n] = fwd + bwd
            print(f"{name:>9} {n:>6} {fwd * 1e3:>11.2f} {bwd * 1e3:>12.2f}")
        if len(BACKENDS) > 1:
            print(f"{'speedup':>9} {n:>6} {results['python', n] / results['compiled', n]:>11.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
