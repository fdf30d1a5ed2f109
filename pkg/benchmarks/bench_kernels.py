#!/usr/bin/env python3
"""Compare the compiled kernels against the numpy fallback.

Kernel-level timings run both implementations in one process; the
end-to-end rows run a short training epoch in a subprocess per backend
(the backend is fixed at import time via SINESEG_KERNELS).

Usage:
    python3 benchmarks/bench_kernels.py            # kernel microbenchmarks
    python3 benchmarks/bench_kernels.py --end-to-end
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from sineseg._kernels import get_backends


def timeit(fn, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_kernels():
    impls = get_backends()
    if "native" not in impls:
        print("compiled kernels unavailable; only the numpy fallback exists")
    rng = np.random.default_rng(0)
    rows = []

    conv_cases = [
        ("unfold 4ch 32^3 k3", (4, 32, 32, 32), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ("unfold 16ch 16^3 k3", (16, 16, 16, 16), (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        ("unfold 32ch 16^3 s2", (32, 16, 16, 16), (3, 3, 3), (2, 2, 2), (1, 1, 1)),
    ]
    for name, shape, k, s, p in conv_cases:
        x = rng.standard_normal(shape).astype(np.float32)
        times = {b: timeit(lambda impl=impl: impl.unfold(x, k, s, p))
                 for b, impl in impls.items()}
        rows.append((name, times))
        cols = np.ascontiguousarray(impls[next(iter(impls))].unfold(x, k, s, p))
        times = {b: timeit(lambda impl=impl: impl.fold_add(cols, shape, k, s, p))
                 for b, impl in impls.items()}
        rows.append((name.replace("unfold", "fold_add"), times))

    for c, t in [(16, 4096), (32, 32768), (64, 262144)]:
        x = rng.standard_normal((c, t)).astype(np.float32)
        lam = rng.uniform(0.2, 0.9, c)
        beta = rng.uniform(0.5, 1.5, c)
        times = {b: timeit(lambda impl=impl: impl.ssm_scan(x, lam, beta))
                 for b, impl in impls.items()}
        rows.append((f"ssm_scan {c}ch T={t}", times))

    backends = list(impls)
    header = f"{'kernel':<28}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, times in rows:
        line = f"{name:<28}" + "".join(f"{times[b]:>14.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{times['numpy'] / times['native']:>9.1f}x"
        print(line)


_EPOCH_PROBE = "--_epoch-probe"


def epoch_probe():
    """One toy optimizer step + eval forward; prints seconds (subprocess body)."""
    from sineseg._kernels import BACKEND
    from sineseg.network import build_network, toy_config
    from sineseg.train import TrainConfig, train_toy

    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 64, 64, 64)).astype(np.float32)
    labels = np.zeros((64, 64, 64), dtype=np.float32)
    labels[20:30, 20:30, 20:30] = 1.0
    net = build_network(toy_config(in_channels=4, seed=0))
    cfg = TrainConfig(max_epochs=3, accum_steps=2, seed=0)
    t0 = time.time()
    train_toy([(x, labels)], net, cfg)
    print(f"{BACKEND}: 3 toy epochs in {time.time() - t0:.2f}s")


def bench_end_to_end():
    for backend in ("numpy", "native"):
        env = dict(os.environ, SINESEG_KERNELS=backend)
        proc = subprocess.run([sys.executable, __file__, _EPOCH_PROBE],
                              env=env, capture_output=True, text=True)
        out = proc.stdout.strip() or proc.stderr.strip()
        print(out if proc.returncode == 0 else f"{backend}: unavailable ({out})")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--end-to-end", action="store_true",
                        help="also time whole training epochs per backend")
    parser.add_argument(_EPOCH_PROBE, dest="epoch_probe", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.epoch_probe:
        epoch_probe()
        return
    bench_kernels()
    if args.end_to_end:
        print()
        bench_end_to_end()


if __name__ == "__main__":
    main()
