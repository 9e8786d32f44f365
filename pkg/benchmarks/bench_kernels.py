"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--dims 48] [--channels 4] [--repeat 5]

Prints the best-of-``repeat`` time for each kernel on both backends, the
speed-up, and the largest absolute difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from crossmas import _pykernels

try:
    from crossmas import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(dims, channels, mi_dims, seed=0):
    rng = np.random.default_rng(seed)
    shape = (dims,) * 3
    f = rng.normal(size=(channels,) + shape)
    disp = np.ascontiguousarray(rng.uniform(-3, 3, size=(3,) + shape))
    g = rng.normal(size=f.shape)
    a = rng.normal(size=(mi_dims,) * 3)
    b = a + 0.5 * rng.normal(size=a.shape)
    return {
        f"warp {channels}x{dims}^3": lambda k: k.warp(f, disp),
        f"warp_vjp {channels}x{dims}^3": lambda k: k.warp_vjp(f, disp, g, True),
        f"patch_mi {mi_dims}^3 r=3": lambda k: k.patch_mi(a, b, 3, 3, 3, 16),
    }


def max_diff(x, y):
    if isinstance(x, tuple):
        return max(max_diff(p, q) for p, q in zip(x, y) if p is not None)
    return float(np.abs(np.asarray(x) - np.asarray(y)).max())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dims", type=int, default=48)
    parser.add_argument("--channels", type=int, default=4)
    parser.add_argument("--mi-dims", type=int, default=16)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels unavailable; run `pip install -e . --no-build-isolation` first")
        return 1

    print(f"{'kernel':<24}{'python (ms)':>13}{'cython (ms)':>13}{'speed-up':>10}{'max |diff|':>12}")
    for name, fn in cases(args.dims, args.channels, args.mi_dims).items():
        times = {}
        for label, mod in (("python", _pykernels), ("cython", _ckernels)):
            timer = timeit.Timer(lambda: fn(mod))
            times[label] = min(timer.repeat(repeat=args.repeat, number=1)) * 1e3
        diff = max_diff(fn(_pykernels), fn(_ckernels))
        print(f"{name:<24}{times['python']:>13.1f}{times['cython']:>13.1f}"
              f"{times['python'] / times['cython']:>9.1f}x{diff:>12.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
