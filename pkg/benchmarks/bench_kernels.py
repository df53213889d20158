"""Compare the numba and numpy backends on the hot kernels and a full run.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import time
from dataclasses import replace

import numpy as np

from ptdl import _kernels
from ptdl.harness import AgentDefaults, DatasetConfig, ExperimentConfig, simulate
from ptdl.model import ModelSpec, init_params


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    cases = [
        ("desk", ModelSpec(64, (32,), 2), 8),
        ("desk", ModelSpec(64, (32,), 2), 16),
        ("desk", ModelSpec(64, (32,), 2), 64),
        ("mnist-mlp", ModelSpec(784, (128,), 10), 64),
        ("deep", ModelSpec(64, (64, 64, 64), 4), 64),
    ]
    for name, spec, b in cases:
        theta = init_params(spec, 0)
        X = rng.random((b, spec.input_dim))
        y = rng.integers(0, spec.num_classes, b)
        dims = spec.dims_array
        row = {}
        for label, flag in (("numba", True), ("numpy", False)):
            with _kernels.use_numba(flag):
                row[label, "grad"] = best_of(lambda: _kernels.clipped_grad_sum(theta, dims, X, y, 1.0), repeat)
                row[label, "pred"] = best_of(lambda: _kernels.predict(theta, dims, X), repeat)
        yield name, spec, b, row


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    print(f"{'case':<10} {'dims':<18} {'b':>4} {'kernel':<5} {'numba us':>10} {'numpy us':>10} {'speedup':>8}")
    for name, spec, b, row in kernel_rows(args.repeat):
        for k in ("grad", "pred"):
            nb, npy = row["numba", k] * 1e6, row["numpy", k] * 1e6
            print(f"{name:<10} {str(spec.dims):<18} {b:>4} {k:<5} {nb:>10.1f} {npy:>10.1f} {npy / nb:>7.2f}x")

    cfg = ExperimentConfig(
        rounds=3,
        dataset=DatasetConfig(dim=64, separation=0.5),
        train_fraction=0.5,
        agents=AgentDefaults(0.2, 8, 5),
    )
    for kind in ("chain", "star"):
        out = []
        for flag in (True, False):
            with _kernels.use_numba(flag):
                out.append(best_of(lambda: simulate(replace(cfg, topology=kind)), 2))
        print(f"simulate {kind:<6} 3 rounds: numba {out[0]:.2f}s  numpy {out[1]:.2f}s  speedup {out[1] / out[0]:.2f}x")


if __name__ == "__main__":
    main()
