#!/usr/bin/env python3
"""Wall-clock pretraining time with numba kernels and with the numpy fallback.

    python3 benchmarks/bench_pretrain.py [--subjects 32] [--epochs 2]

Each backend runs in its own interpreter because the switch is read at import.
A one-epoch warm-up run absorbs numba compilation before timing.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys

RUN = """
import time
from m2ae.augment import AugmentConfig
from m2ae.losses import LossWeights
from m2ae.model import ModelConfig
from m2ae.signals import make_dataset, split_by_subject
from m2ae.training import TrainConfig, pretrain
ds = split_by_subject(make_dataset({subjects}, 2, seed=0), seed=0)
pretrain(ds, ModelConfig(), TrainConfig(max_epochs=1), LossWeights(), AugmentConfig())
t0 = time.perf_counter()
pretrain(ds, ModelConfig(), TrainConfig(max_epochs={epochs}), LossWeights(), AugmentConfig())
print(time.perf_counter() - t0)
"""


def timed(flag, subjects, epochs):
    env = {**os.environ, "M2AE_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", RUN.format(subjects=subjects, epochs=epochs)],
                         env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=2)
    args = ap.parse_args(argv)
    t_nb = timed("1", args.subjects, args.epochs)
    t_np = timed("0", args.subjects, args.epochs)
    print(f"numba {t_nb:.2f} s, numpy {t_np:.2f} s, speedup {t_np / t_nb:.2f}x")


if __name__ == "__main__":
    main()
