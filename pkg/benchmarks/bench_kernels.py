"""Time the post-processor kernel: numba vs pure numpy.

The attack loop calls the kernel once per query with a single row, so the
``n=1`` rows are the ones that matter for attack runtime; larger batches are
what calibration and clean evaluation use.

    python benchmarks/bench_kernels.py --repeats 20
"""

import argparse
import time

import numpy as np

from aaalab import _kernels
from aaalab._accel import HAS_NUMBA
from aaalab.defense import AaaConfig, _target_loss_rows


def inputs(n, k, seed=0):
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(n, k)) * 4
    s = np.sort(z0, axis=1)
    cfg = AaaConfig()
    l_t = _target_loss_rows(s[:, -1] - s[:, -2], cfg.t, cfg.alpha, cfg.kappa)
    e = np.exp(z0 - z0.max(1, keepdims=True))
    p_t = (e / e.sum(1, keepdims=True)).max(1)
    return z0, l_t, p_t, np.argmax(z0, 1), cfg


def best_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--sizes", default="1,32,1024")
    ap.add_argument("--classes", default="3,10")
    args = ap.parse_args(argv)

    backends = ["numpy"] + (["numba"] if HAS_NUMBA else [])
    if not HAS_NUMBA:
        print("numba not available (or disabled); timing numpy only")
    print(f"{'n':>6} {'K':>4} " + " ".join(f"{b + ' ms':>12}" for b in backends) + f" {'speedup':>9} {'max|diff|':>10}")
    for n in map(int, args.sizes.split(",")):
        for k in map(int, args.classes.split(",")):
            z0, l_t, p_t, c, cfg = inputs(n, k)
            call = dict(beta=cfg.beta, iters=cfg.iterations, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
            out, ms = {}, {}
            for b in backends:
                run = lambda b=b: _kernels.optimize_logits(z0, l_t, p_t, c, backend=b, **call)  # noqa: E731
                out[b] = run()  # warm-up (and JIT compile)
                ms[b] = best_time(run, args.repeats) * 1e3
            speed = f"{ms['numpy'] / ms['numba']:9.1f}x" if "numba" in ms else f"{'-':>9}"
            diff = f"{np.abs(out['numpy'] - out['numba']).max():10.2e}" if "numba" in out else f"{'-':>10}"
            print(f"{n:>6} {k:>4} " + " ".join(f"{ms[b]:12.3f}" for b in backends) + f" {speed} {diff}")


if __name__ == "__main__":
    main()
