"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from posmask import kernels


def cases(rng):
    idx = rng.integers(0, 1000, size=4096)
    src = rng.standard_normal((4096, 64))
    qs = np.linspace(0.5, 6.0, 12)
    return {
        "scatter_add_rows (4096x64 -> 1000)": lambda: kernels.scatter_add_rows(1000, idx, src),
        "betainc_reg x200": lambda: [kernels.betainc_reg(2.5, 3.5, x) for x in np.linspace(0.01, 0.99, 200)],
        "studentized_range_sf x12": lambda: [kernels.studentized_range_sf(q, 4, 16) for q in qs],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    results = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            fn()
            number = 3
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            results.setdefault(label, {})[name] = best
    print(f"{'kernel':40s}" + "".join(f"{b:>14s}" for b in backends) + "     speedup")
    for label, row in results.items():
        line = f"{label:40s}" + "".join(f"{row[b] * 1e3:12.3f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row[backends[0]]:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
