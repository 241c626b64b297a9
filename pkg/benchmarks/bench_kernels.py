"""Numba versus pure-numpy kernels, plus end-to-end training-step timing.

Kernel timings call both implementations directly.  The end-to-end
section reruns this script in child processes with and without
BDPL_DISABLE_NUMBA, since the backend is fixed at import time.

Run:

    python benchmarks/bench_kernels.py [--repeats 20] [--skip-end-to-end]
"""

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from bdpl.numerics import kernels


def timed(fn, *args, repeats=20):
    fn(*args)  # warm-up, includes jit compilation
    out = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        out.append(time.perf_counter() - start)
    return statistics.median(out)


def kernel_cases(rng):
    n, nnz, d = 6000, 30000, 64
    rows = np.sort(rng.integers(0, n, nnz))
    indptr = np.searchsorted(rows, np.arange(n + 1)).astype(np.int64)
    indices = rng.integers(0, n, nnz).astype(np.int64)
    data = rng.random(nnz)
    dense = rng.normal(size=(n, d))
    yield "csr_matmul (6000 rows, 30000 nnz, d=64)", \
        kernels.csr_matmul_numba, kernels.csr_matmul_numpy, (indptr, indices, data, dense)

    index = rng.integers(0, 5000, 64 * 50).astype(np.int64)
    grads = rng.normal(size=(index.size, d))

    def scatter(impl):
        def run(target, idx, rows_):
            impl(target.copy(), idx, rows_)
        return run

    yield "scatter_add_rows (3200 rows into 5000x64)", scatter(kernels.scatter_add_rows_numba), \
        scatter(kernels.scatter_add_rows_numpy), (np.zeros((5000, d)), index, grads)

    scores = np.round(rng.normal(size=(256, 16000)), 2)
    targets = rng.integers(0, 16000, 256).astype(np.int64)
    yield "rank_rows (256 x 16000 scores)", kernels.rank_rows_numba, kernels.rank_rows_numpy, (scores, targets)


def train_step_timing(n_max, batches=10):
    from bdpl.data import Behavior, Instance, batch_sequences
    from bdpl.model import BDPLParams, GraphCache, TrainConfig
    from bdpl.numerics import Adam
    from bdpl.train import train_step

    rng = np.random.default_rng(0)
    n_items = 2000
    config = TrainConfig(d=64, n_max=n_max, batch_size=128, dtype="float32")
    insts = []
    for u in range(128 * batches):
        k = n_max + 5
        behs = [Behavior.PURCHASE if x < 0.3 else Behavior.EXAMINATION for x in rng.random(k)]
        insts.append(Instance(u, tuple(zip(rng.integers(1, n_items + 1, k).tolist(), behs)),
                              int(rng.integers(1, n_items + 1))))
    params = BDPLParams.init(n_items, config, rng)
    opt = Adam(params.named(), learning_rate=config.learning_rate)
    cache = GraphCache()
    data = batch_sequences(insts, config.batch_size, n_max)
    train_step(data[0], params, config, opt, rng, cache)  # warm-up
    times = []
    for b in data:
        start = time.perf_counter()
        train_step(b, params, config, opt, rng, cache)
        times.append(time.perf_counter() - start)
    return statistics.mean(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--skip-end-to-end", action="store_true")
    parser.add_argument("--child", type=int, help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.child is not None:
        print(json.dumps({"backend": kernels.BACKEND, "seconds": train_step_timing(args.child)}))
        return

    print(f"numba available: {kernels.NUMBA_AVAILABLE}")
    print(f"{'kernel':48s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow, inputs in kernel_cases(np.random.default_rng(0)):
        t_fast = timed(fast, *inputs, repeats=args.repeats)
        t_slow = timed(slow, *inputs, repeats=args.repeats)
        print(f"{name:48s} {t_fast * 1e3:10.3f} {t_slow * 1e3:10.3f} {t_slow / t_fast:8.2f}")

    if args.skip_end_to_end:
        return
    print()
    print("training step, batch 128, d=64 (mean over 10 batches)")
    for disable in ("0", "1"):
        for n in (25, 50):
            env = dict(os.environ, BDPL_DISABLE_NUMBA=disable)
            out = subprocess.run([sys.executable, __file__, "--child", str(n)], env=env,
                                 capture_output=True, text=True, check=True)
            res = json.loads(out.stdout.strip().splitlines()[-1])
            print(f"  backend {res['backend']:5s} n_max {n:2d}: {res['seconds'] * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
