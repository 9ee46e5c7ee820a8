"""Compare the compiled kernel extension against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from voxseg import kernels


def _time(fn, repeats):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = {"python": kernels.get_backend("python")}
    try:
        backends["compiled"] = kernels.get_backend("compiled")
    except ImportError:
        print("compiled extension not available; benchmarking python only")

    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (1, 32, 32, 32, 8)).astype(np.float32)
    w = rng.normal(0, 1, (3, 3, 3, 8, 16)).astype(np.float32)
    b = np.zeros(16, dtype=np.float32)
    stride = (2, 2, 2)

    data = rng.normal(0, 1, (64, 64, 64))
    vox = rng.uniform(-1, 64, (200_000, 3))

    cases = {
        "conv3d_forward 32^3 x8->16 s2":
            lambda be: be.conv3d_forward(x, w, b, stride),
        "conv3d_backward 32^3 x8->16 s2":
            lambda be: be.conv3d_backward(
                x, w, np.ascontiguousarray(
                    backends["python"].conv3d_forward(x, w, b, stride)), stride),
        "resample_trilinear 200k pts":
            lambda be: be.resample_trilinear(data, vox, 0.0),
    }

    print(f"{'kernel':<34} " + " ".join(f"{n:>12}" for n in backends) +
          ("      speedup" if len(backends) == 2 else ""))
    for label, call in cases.items():
        times = {n: _time(lambda be=be: call(be), args.repeats)
                 for n, be in backends.items()}
        row = f"{label:<34} " + " ".join(f"{times[n] * 1e3:>10.2f}ms" for n in times)
        if len(times) == 2:
            row += f"   {times['python'] / times['compiled']:>8.1f}x"
        print(row)


if __name__ == "__main__":
    main()
