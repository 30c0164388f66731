"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 50]

Shapes follow a desk-scale run: 64-unit hidden layers with a 128 batch,
one k-NN query against 512 buffer states per environment step, and Adam
over a 64x64 weight matrix.
"""

import argparse
import timeit

import numpy as np

from selfaug_pbrl.approx import _pykernels

try:
    from selfaug_pbrl.approx import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    z = rng.normal(size=(128, 64))
    g = rng.normal(size=(128, 64))
    q = rng.normal(size=(1, 9))
    pts = rng.normal(size=(512, 9))
    w = rng.normal(size=(64, 64))
    gw = rng.normal(size=(64, 64))

    def adam(mod):
        p, m, v = w.copy(), np.zeros_like(w), np.zeros_like(w)
        return lambda: mod.adam_update(p, gw, m, v, 3e-4, 0.9, 0.999, 1e-8, 10)

    return {
        "leaky_relu 128x64": lambda mod: (lambda: mod.leaky_relu(z, 0.01)),
        "leaky_relu_backward 128x64": lambda mod: (lambda: mod.leaky_relu_backward(z, g, 0.01)),
        "adam_update 64x64": adam,
        "kth_nearest 1 vs 512, k=5": lambda mod: (lambda: mod.kth_nearest_distance(q, pts, 5)),
        "kth_nearest 128 vs 512, k=5": lambda mod: (lambda: mod.kth_nearest_distance(pts[:128], pts, 5)),
    }


def bench(fn, repeat):
    number = 200
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    if _ckernels is None:
        print("compiled kernels not built; run `python setup.py build_ext --inplace` first")
    print(f"{'kernel':32s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, make in cases(rng).items():
        t_np = bench(make(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:32s} {t_np:10.2f} {'-':>10s} {'-':>8s}")
            continue
        t_c = bench(make(_ckernels), args.repeat)
        print(f"{name:32s} {t_np:10.2f} {t_c:10.2f} {t_np / t_c:7.1f}x")


if __name__ == "__main__":
    main()
