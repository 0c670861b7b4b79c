"""Time the compiled and numpy kernel backends on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one full training step of the default model with each backend.
"""
import argparse
import timeit

import numpy as np

from siamxd import kernels
from siamxd.data import StaggeredBatch
from siamxd.model import ModelConfig, init_params
from siamxd.training import TrainConfig, train_step


def cases(rng):
    A, B = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
    D = kernels.pairwise_distances(A, B)
    G = rng.normal(size=D.shape)
    x, w = rng.normal(size=(32, 1, 16, 16)), rng.normal(size=(8, 1, 3, 3))
    gy = rng.normal(size=(32, 8, 14, 14))
    ys = np.array([0, 1] * 8)
    batch = StaggeredBatch(rng.uniform(size=(16, 16, 16)), rng.uniform(size=(16, 16, 16)), ys, ys[::-1], None, None)
    model = init_params(ModelConfig())
    config = TrainConfig(cd_margin=3.0)
    return {
        "pairwise 16x16 d16": lambda: kernels.pairwise_distances(A, B),
        "pairwise backward": lambda: kernels.pairwise_distances_backward(A, B, D, G),
        "conv2d 32x1x16x16 k3 c8": lambda: kernels.conv2d_forward(x, w),
        "conv2d backward": lambda: kernels.conv2d_backward(x, w, gy),
        "train step (default model)": lambda: train_step(model, batch, config, lr=1e-6),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is timed")
    timings = {}
    for name in backends:
        kernels.use_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            number = 50
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            timings.setdefault(label, {})[name] = best
    print(f"{'case':30s}" + "".join(f"{b:>14s}" for b in backends) + ("    speedup" if len(backends) > 1 else ""))
    for label, row in timings.items():
        line = f"{label:30s}" + "".join(f"{row[b] * 1e6:11.1f} us" for b in backends)
        if len(backends) > 1:
            line += f"   {row['python'] / row['cython']:7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
