"""Time the compiled kernels against the numpy/pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from lipunit import _fallback, kernels


def cases(rng):
    x = rng.standard_normal((20000, 54))
    c = rng.standard_normal((64, 54))
    labels = rng.integers(0, 64, len(x))
    ref = rng.integers(0, 64, 400).tolist()
    hyp = rng.integers(0, 64, 380).tolist()
    return {
        "assign_nearest 20000x54, K=64": lambda impl: kernels.assign_nearest(x, c, impl=impl),
        "centroid_sums 20000x54, K=64": lambda impl: kernels.centroid_sums(x, labels, 64, impl=impl),
        "levenshtein 400 vs 380 tokens": lambda impl: kernels.levenshtein(ref, hyp, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = {"python": _fallback}
    if kernels.BACKEND == "cython":
        from lipunit import _kernels
        impls["cython"] = _kernels
    else:
        print("compiled core not built; timing the fallback only")
    print(f"{'kernel':<34}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}")
    for label, fn in cases(np.random.default_rng(0)).items():
        times = {name: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat))
                 for name, impl in impls.items()}
        row = f"{label:<34}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
