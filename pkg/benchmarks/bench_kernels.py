"""Compare the numba and pure-numpy kernel paths.

    python benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python benchmarks/bench_kernels.py --e2e      # also time a short training run per backend

The end-to-end timing runs in subprocesses so that ``ECL_DISABLE_NUMBA``
is read fresh at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ecl import _kernels as K

E2E_SNIPPET = """
import time
from ecl import BACKEND
from ecl.collab import TrainConfig, fit, model_config_for
from ecl.ltdata import ClassPrior, LongTailSpec, build_synthetic_lt_dataset
ds = build_synthetic_lt_dataset(LongTailSpec(10, 500, 100, seed=0), 16, 2.0)
cfg = TrainConfig(ClassPrior.from_counts(ds.counts), K=3, epochs={epochs})
fit(ds, TrainConfig(cfg.prior, K=3, epochs=1), model_config_for(ds))  # warm caches
t = time.perf_counter()
fit(ds, cfg, model_config_for(ds))
print(BACKEND, time.perf_counter() - t)
"""


def _cases(n, c, rng):
    z = rng.normal(size=(n, c)) * 3
    zs = rng.normal(size=(n, c)) * 3
    y = rng.integers(0, c, n)
    conf = rng.uniform(size=n)
    correct = (rng.uniform(size=n) < 0.5).astype(np.float64)
    return {
        "xent_rows": (lambda: K.xent_rows_numpy(z, y), lambda: K.xent_rows_numba(z, y)),
        "kl_rows": (lambda: K.kl_rows_numpy(z, zs, 1.0), lambda: K.kl_rows_numba(z, zs, 1.0)),
        "head_probs": (lambda: K.head_probs_numpy(z, 1e-6), lambda: K.head_probs_numba(z, 1e-6)),
        "bin_stats": (lambda: K.bin_stats_numpy(conf, correct, 15),
                      lambda: K.bin_stats_numba(conf, correct, 15)),
        "class_mean": (lambda: K.class_mean_numpy(conf, y, c), lambda: K.class_mean_numba(conf, y, c)),
    }


def bench_kernels(sizes, classes, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'rows':>8}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for n in sizes:
        for name, (f_np, f_nb) in _cases(n, classes, rng).items():
            f_nb()  # compile outside the timing
            t_np = min(timeit.repeat(f_np, number=repeat, repeat=5)) / repeat * 1e6
            t_nb = min(timeit.repeat(f_nb, number=repeat, repeat=5)) / repeat * 1e6
            print(f"{name:<12}{n:>8}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>10.2f}")


def bench_end_to_end(epochs):
    for flag in ("1", "0"):
        env = dict(os.environ, ECL_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", E2E_SNIPPET.format(epochs=epochs)],
                             env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"fit K=3, {epochs} epochs, backend={backend}: {float(seconds):.2f} s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="64,1024,16384", help="row counts, comma-separated")
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--e2e", action="store_true", help="also time training end to end")
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels([int(s) for s in args.sizes.split(",")], args.classes, args.repeat)
    if args.e2e:
        bench_end_to_end(args.epochs)


if __name__ == "__main__":
    main()
