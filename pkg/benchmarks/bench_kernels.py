"""Compare the compiled clustering kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Also times one full E-step and one training step so the kernel share of a
step is visible.
"""

import argparse
import timeit

import numpy as np

from subgroupte import _pykernels, clustering

try:
    from subgroupte import _ckernels
except ImportError:
    _ckernels = None

KERNELS = ("kde_adjust", "hard_assign", "update_centroids", "soft_probabilities")


def args_for(name, mu, te, h):
    labels = _pykernels.hard_assign(mu, te)
    return {
        "kde_adjust": (mu, te, h),
        "hard_assign": (mu, te),
        "update_centroids": (mu, labels, te),
        "soft_probabilities": (mu, te),
    }[name]


def bench(fn, args, repeat):
    t = timeit.Timer(lambda: fn(*args))
    loops, _ = t.autorange()
    return min(t.repeat(repeat=repeat, number=loops)) / loops


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    a = ap.parse_args()
    print(f"active backend: {clustering.BACKEND}")
    if _ckernels is None:
        print("compiled kernels are not built; only the fallback can be timed")
    g = np.random.default_rng(0)
    print(f"{'kernel':<20}{'N':>7}{'K':>4}{'python us':>12}{'cython us':>12}{'speedup':>9}")
    for n, K in ((64, 4), (64, 10), (1000, 4), (10000, 10)):
        te = g.normal(size=n)
        mu = np.sort(g.normal(size=K))
        for name in KERNELS:
            args = args_for(name, mu, te, 0.3)
            tp = bench(getattr(_pykernels, name), args, a.repeat) * 1e6
            if _ckernels is not None:
                tc = bench(getattr(_ckernels, name), args, a.repeat) * 1e6
                print(f"{name:<20}{n:>7}{K:>4}{tp:>12.2f}{tc:>12.2f}{tp / tc:>8.1f}x")
            else:
                print(f"{name:<20}{n:>7}{K:>4}{tp:>12.2f}{'-':>12}{'-':>9}")

    te = g.normal(size=64)
    cs = clustering.init_kmeanspp(te, 4, clustering.RngStream(0))
    step = bench(lambda: clustering.cluster_step(cs, te), (), a.repeat) * 1e6
    print(f"\nfull E-step (batch 64, K=4, {clustering.BACKEND}): {step:.1f} us")

    from subgroupte.data import generate_synthetic
    from subgroupte.nn import RngStream
    from subgroupte.training import Trainer, TrainConfig

    ds = generate_synthetic(320, 320, 10, RngStream(0))
    tr = Trainer(ds, None, TrainConfig(K=4, lr=0.05))
    batch = next(tr.batches())
    tr.em_step(0, batch)
    t = bench(lambda: tr.em_step(0, batch), (), 5) * 1e3
    print(f"one EM training step (batch 64, p=10, d=32): {t:.2f} ms")


if __name__ == "__main__":
    main()
