"""Time the numba kernels against the numpy reference path.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times one full OOD suite build per backend at the acceptance-suite scale.
"""
import argparse
import time

import numpy as np

from gear.data import SyntheticSpec, generate_synthetic
from gear.kernels import available_backends, get_backend
from gear.ood import OODConfig, _csr, build_ood_suite


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.normal(size=(1000, 8))
    cent = rng.normal(size=(100, 8))
    labels = rng.integers(0, 100, size=1000)
    attrs = [rng.integers(0, 300, size=8).tolist() for _ in range(1000)]
    indptr, flat, n_attrs = _csr(attrs)
    cats = rng.integers(0, 2, size=1000)
    steps = 50_000
    toggles = rng.integers(0, 1000, size=steps).astype(np.int64)
    uniforms = rng.random(steps)
    return {
        "nearest_centroid (n=1000, k=100, d=8)": lambda k: k.nearest_centroid(x, cent),
        "centroid_update (n=1000, k=100, d=8)": lambda k: k.centroid_update(x, labels, 100),
        "anneal (n=1000, 50k steps)": lambda k: k.anneal(indptr, flat, cats, n_attrs, toggles, uniforms,
                                                         1.0, 0.999, 500),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = available_backends()
    print("backends:", ", ".join(backends))
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for b in backends:
            k = get_backend(b)
            fn(k)  # warm-up (JIT compile on first call)
            row[b] = best_of(lambda: fn(k), args.repeat)
        line = "  ".join(f"{b}={t * 1e3:9.2f} ms" for b, t in row.items())
        if len(row) == 2:
            line += f"  speedup x{row['numpy'] / row['numba']:.1f}"
        print(f"{name:40s} {line}")

    _, test = generate_synthetic(SyntheticSpec(n_train=0, n_test=1000))
    for b in backends:
        build_ood_suite(test[:50], OODConfig(k=5, steps=100), backend=b)
        t = best_of(lambda: build_ood_suite(test, OODConfig(), backend=b), 1)
        print(f"{'build_ood_suite (1000 records, defaults)':40s} {b}={t:.2f} s")


if __name__ == "__main__":
    main()
