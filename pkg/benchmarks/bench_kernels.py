"""Numba vs numpy timings for the hot kernels, plus one training epoch run
in a subprocess under each backend.

    python benchmarks/bench_kernels.py            # kernels + epoch
    python benchmarks/bench_kernels.py --quick    # smaller sizes, no epoch
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from evorec.numerics import kernels


def best_of(fn, repeat=5):
    fn()  # warm up (compiles the numba path)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(scale):
    rng = np.random.default_rng(0)
    n_nodes, n_edges, d = 1500 * scale, 40000 * scale, 64
    dst = np.sort(rng.integers(0, n_nodes, n_edges))
    src = rng.integers(0, n_nodes, n_edges)
    coef = rng.random(n_edges)
    x = rng.standard_normal((n_nodes, d))
    yield "spmm", (dst, src, coef, x, n_nodes)

    idx = rng.integers(0, n_nodes, n_edges)
    yield "index_add", (n_nodes, idx, rng.standard_normal((n_edges, d)))

    n_imp, c = 20000 * scale, 5
    labels = np.zeros((n_imp, c), dtype=np.int64)
    labels[:, 0] = 1
    yield "impression_auc", (rng.standard_normal((n_imp, c)), labels)

    n_rows, n_items, k = 20000 * scale, 500, 4
    lens = rng.integers(0, 8, n_rows)
    ptr = np.concatenate([[0], np.cumsum(lens)])
    excl = np.concatenate([np.sort(rng.choice(n_items, l, replace=False)) for l in lens]).astype(np.int64)
    yield "sample_excluding", (ptr, excl, n_items, rng.random((n_rows, k)))


def bench_kernels(scale, repeat):
    rows = []
    for name, args in cases(scale):
        t_np = best_of(lambda: getattr(kernels, f"{name}_numpy")(*args), repeat)
        t_nb = best_of(lambda: getattr(kernels, f"{name}_numba")(*args), repeat)
        same = np.array_equal(getattr(kernels, f"{name}_numpy")(*args), getattr(kernels, f"{name}_numba")(*args),
                              equal_nan=True)
        rows.append({"kernel": name, "numpy_ms": 1e3 * t_np, "numba_ms": 1e3 * t_nb,
                     "speedup": t_np / t_nb, "identical": bool(same)})
    return rows


EPOCH_SNIPPET = """
import json, time
from evorec.data import SynthConfig, synth_generate, partition_stages, chronological_split
from evorec.training import TrainConfig, run_training
from evorec.numerics import kernels
sd = synth_generate(SynthConfig(seed=0))
split = chronological_split(partition_stages(sd.log, "1w"), seed=0)
cfg = TrainConfig(lr=2e-3, max_epochs=2, patience=2, seed=0)
run_training(TrainConfig(lr=2e-3, max_epochs=1, seed=0), split, sd.log.item_features)  # warm up
t = time.perf_counter()
res = run_training(cfg, split, sd.log.item_features)
print(json.dumps({"backend": kernels.backend(), "seconds_per_epoch": (time.perf_counter() - t) / len(res.history),
                  "val_auc": res.history[-1]["val_auc"]}))
"""


def bench_epoch():
    out = []
    for disable in ("0", "1"):
        env = dict(os.environ, EVOREC_DISABLE_NUMBA=disable)
        proc = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(proc.stderr)
        out.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    scale = 1 if args.quick else 4
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for r in bench_kernels(scale, args.repeat):
        print(f"{r['kernel']:<18}{r['numpy_ms']:>10.2f}{r['numba_ms']:>10.2f}{r['speedup']:>9.1f}  {r['identical']}")
    if not args.quick:
        print()
        for r in bench_epoch():
            print(f"epoch [{r['backend']}]: {r['seconds_per_epoch']:.2f} s  (val AUC {r['val_auc']:.4f})")


if __name__ == "__main__":
    main()
