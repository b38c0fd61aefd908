#!/usr/bin/env python3
"""numba vs pure-numpy kernels on activation-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--rows 256] [--cols 256]

Prints per-call microseconds for each backend, the speed-up, and the max
absolute disagreement between the two outputs.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from m2ae import kernels as K


def timed(fn, args, repeat):
    fn(*args)  # compile / warm caches
    t0 = time.perf_counter()
    for _ in range(repeat):
        out = fn(*args)
    return (time.perf_counter() - t0) / repeat * 1e6, out


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def cases(rows, cols, rng):
    x = rng.normal(size=(rows, cols))
    g = rng.normal(size=(rows, cols))
    gamma, beta = rng.normal(size=cols), rng.normal(size=cols)
    mask = rng.random((rows, cols)) > 0.1
    mask[:, 0] = True
    _, xhat, rstd = K.layernorm_fwd_np(x, gamma, beta, 1e-5)
    y_soft = K.softmax_fwd_np(x)
    _, t = K.gelu_fwd_np(x)
    pos, neg = rng.normal(size=rows * 4), rng.normal(size=rows * 4)
    return {
        "layernorm_fwd": (x, gamma, beta, 1e-5),
        "layernorm_bwd": (g, xhat, rstd, gamma),
        "softmax_fwd": (x,),
        "softmax_bwd": (g, y_soft),
        "logsumexp_fwd": (x, mask),
        "gelu_fwd": (x,),
        "gelu_bwd": (g, x, t),
        "concordance": (pos, neg),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--rows", type=int, default=256)
    ap.add_argument("--cols", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':16s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, inputs in cases(args.rows, args.cols, rng).items():
        reps = max(1, args.repeat // 20) if name == "concordance" else args.repeat
        t_np, out_np = timed(getattr(K, f"{name}_np"), inputs, reps)
        t_nb, out_nb = timed(getattr(K, f"{name}_nb"), inputs, reps)
        diff = float(np.max(np.abs(_flat(out_np) - _flat(out_nb))))
        print(f"{name:16s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
