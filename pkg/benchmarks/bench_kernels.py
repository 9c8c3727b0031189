"""Compare the compiled and numpy kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Shapes mirror a desk-scale cell: a few hundred training embeddings of width
32 queried by the test set, and rank computations over a few hundred scores.
"""
import argparse
import timeit

import numpy as np

from locood import kernels

CASES = (
    ("knn 150x225 d=32 k=1", "sorted_knn_distances", lambda r: (r.random((150, 32)),
                                                                r.random((225, 32)), 1)),
    ("knn 150x225 d=32 k=56", "sorted_knn_distances", lambda r: (r.random((150, 32)),
                                                                 r.random((225, 32)), 56)),
    ("knn 1000x5000 d=32 k=10", "sorted_knn_distances", lambda r: (r.random((1000, 32)),
                                                                   r.random((5000, 32)), 10)),
    ("ranks n=300 (ties)", "average_ranks", lambda r: (r.integers(0, 50, 300).astype(float),)),
    ("ranks n=100000", "average_ranks", lambda r: (r.random(100_000),)),
)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    if len(backends) == 1:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'case':28s}" + "".join(f"{b:>12s}" for b in backends) + "     speedup")
    for name, fn_name, make in CASES:
        inputs = make(np.random.default_rng(0))
        fn = getattr(kernels, fn_name)
        times = []
        for backend in backends:
            timer = timeit.Timer(lambda: fn(*inputs, backend=backend))
            number, _ = timer.autorange()
            times.append(min(timer.repeat(args.repeat, number)) / number)
        cells = "".join(f"{t * 1e3:10.3f}ms" for t in times)
        speed = f"{times[0] / times[1]:10.1f}x" if len(times) == 2 else ""
        print(f"{name:28s}{cells}{speed}")


if __name__ == "__main__":
    main()
