"""Time the compiled geometry kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best wall time of each backend and the
speed-up. Both backends must agree on every output; a mismatch aborts.
"""
import argparse
import sys
import timeit

import numpy as np

from hierplan import kernels


def _boxes(rng, n):
    return np.column_stack([rng.uniform(-30, 30, (n, 2)), rng.uniform(0.5, 3, (n, 2)), rng.uniform(-np.pi, np.pi, n)])


def cases(rng):
    theta = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    poly = np.column_stack([25 * np.cos(theta), 15 * np.sin(theta) * (1 + 0.2 * np.cos(3 * theta))])
    return {
        "obb_overlap_pairs (20k pairs)": ("obb_overlap_pairs", (_boxes(rng, 20000), _boxes(rng, 20000))),
        "obb_overlap_any (6 x 40 agents)": ("obb_overlap_any", (_boxes(rng, 6), _boxes(rng, 240).reshape(6, 40, 5))),
        "points_in_polygon (20k pts, 64 verts)": ("points_in_polygon", (rng.uniform(-30, 30, (20000, 2)), poly)),
        "points_in_obbs (20k pts, 30 boxes)": ("points_in_obbs", (rng.uniform(-30, 30, (20000, 2)), _boxes(rng, 30))),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    print(f"{'kernel':40s} {'cython ms':>10s} {'python ms':>10s} {'speed-up':>9s}")
    for label, (name, inputs) in cases(np.random.default_rng(args.seed)).items():
        times, outs = {}, {}
        for backend in ("cython", "python"):
            kernels.use_backend(backend)
            fn = getattr(kernels, name)
            outs[backend] = np.asarray(fn(*inputs))
            number = 3 if backend == "python" else 20
            times[backend] = min(timeit.repeat(lambda: fn(*inputs), number=number, repeat=args.repeat)) / number
        if not np.array_equal(outs["cython"], outs["python"]):
            print(f"{label}: backends disagree", file=sys.stderr)
            return 1
        print(f"{label:40s} {1e3 * times['cython']:10.3f} {1e3 * times['python']:10.3f} "
              f"{times['python'] / times['cython']:8.1f}x")
    kernels.use_backend("cython")
    return 0


if __name__ == "__main__":
    sys.exit(main())
