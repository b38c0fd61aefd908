#!/usr/bin/env python3
"""Lower bound on cross-modal reconstruction MSE when the ECG-PPG delay is unknown.

    python3 benchmarks/recon_floor.py [--subjects 100] [--grid 41]

The predictor is given every subject parameter except the delay, and it
averages the z-scored target over a uniform grid of delays. That average is the
MSE-optimal guess under a uniform delay prior. Any model that cannot infer the
delay from the visible signal cannot beat this number. Noise is switched off,
so the result is a pure timing floor.
"""
from __future__ import annotations

import argparse
import dataclasses

import numpy as np

from m2ae.signals import DELAY_RANGE, SAMPLE_RATE, SEGMENT_LEN, _ecg_wave, _ppg_wave, generate_subject


def zscore(x):
    return (x - x.mean()) / x.std()


def floors(n_subjects, grid):
    t = np.arange(SEGMENT_LEN) / SAMPLE_RATE
    delays = np.linspace(*DELAY_RANGE, grid)
    ecg_err, ppg_err = [], []
    for sid in range(n_subjects):
        p = dataclasses.replace(generate_subject(sid), noise_std=0.0)
        # PPG is given; its pulse feet pin the beats only up to the unknown delay
        e = _ecg_wave(p, t)
        mu, sd = e.mean(), e.std()
        guesses = [(_ecg_wave(dataclasses.replace(p, phase_s=p.phase_s + p.ppg_delay_s - d), t) - mu) / sd
                   for d in delays]
        ecg_err.append(np.mean((zscore(e) - np.mean(guesses, axis=0)) ** 2))

        q = _ppg_wave(p, t, SAMPLE_RATE)
        mq, sq = q.mean(), q.std()
        guesses = [(_ppg_wave(dataclasses.replace(p, ppg_delay_s=d), t, SAMPLE_RATE) - mq) / sq for d in delays]
        ppg_err.append(np.mean((zscore(q) - np.mean(guesses, axis=0)) ** 2))
    return float(np.mean(ecg_err)), float(np.mean(ppg_err))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=100)
    ap.add_argument("--grid", type=int, default=41, help="delay grid points")
    args = ap.parse_args(argv)
    e, p = floors(args.subjects, args.grid)
    print(f"ecg from ppg: {e:.3f}")
    print(f"ppg from ecg: {p:.3f}")


if __name__ == "__main__":
    main()
