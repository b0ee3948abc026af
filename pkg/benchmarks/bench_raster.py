"""Compare the compiled and pure-Python rasterizers on the default synthetic scene.

    python benchmarks/bench_raster.py [--repeat 5] [--size 128]

Prints forward and backward wall time per backend and the max abs difference
between the two backends' images and gradients.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from splat4d import raster
from splat4d.render import render, render_backward
from splat4d.synth import SyntheticSpec, build_scene, default_cameras


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=128)
    args = ap.parse_args(argv)

    spec = SyntheticSpec(width=args.size, height=args.size)
    scene = build_scene(spec).truth
    cam = default_cameras(1, spec.width, spec.height)[0]
    d_img = np.random.default_rng(0).normal(size=(spec.height, spec.width, 3))

    results = {}
    for name in sorted(raster.BACKENDS):
        t_fwd, out = _time(lambda: render(scene, cam, 0.5, backend=name), args.repeat)
        t_bwd, grads = _time(lambda: render_backward(out, d_img), args.repeat)
        results[name] = (t_fwd, t_bwd, out.image, grads)
        print(f"{name:9s} forward {t_fwd * 1e3:8.2f} ms   backward {t_bwd * 1e3:8.2f} ms")

    if {"python", "compiled"} <= results.keys():
        py, cc = results["python"], results["compiled"]
        img_diff = np.abs(py[2] - cc[2]).max()
        grad_diff = max(np.abs(py[3][k] - cc[3][k]).max() for k in py[3])
        print(f"speedup   forward {py[0] / cc[0]:8.1f}x     backward {py[1] / cc[1]:8.1f}x")
        print(f"max |image diff| {img_diff:.3e}   max |grad diff| {grad_diff:.3e}")
    else:
        print("compiled backend not built; run `python setup.py build_ext --inplace`")


if __name__ == "__main__":
    main()
