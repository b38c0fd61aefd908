"""Noise + time-warp augmentation and same-subject positive-view selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signals import ECG, PPG, SignalSegment, zscore


@dataclass(frozen=True)
class AugmentConfig:
    warp_step_std: float = 0.2
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.warp_step_std <= 0:
            raise ValueError("warp_step_std must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def _rng(*keys):
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys])


def warp_curve(n, warp_step_std, rng):
    """Random walk of ``n`` N(0, warp_step_std) steps, min-max scaled to [0, 1]."""
    walk = np.cumsum(rng.normal(0.0, warp_step_std, n))
    lo, hi = walk.min(), walk.max()
    if hi == lo:
        return np.zeros(n)
    return (walk - lo) / (hi - lo)


def augment_signal(samples, config: AugmentConfig, rng=None):
    """White noise, then resample the noisy signal at warped timestamps, then z-score."""
    x = np.asarray(samples, dtype=np.float64)
    rng = _rng(config.seed, 0xA06) if rng is None else rng
    noisy = x + rng.normal(0.0, config.noise_std, x.size) if config.noise_std > 0 else x.copy()
    t = np.arange(x.size, dtype=np.float64)
    warped_t = t + warp_curve(x.size, config.warp_step_std, rng)
    warped = np.interp(np.clip(warped_t, 0.0, x.size - 1), t, noisy)
    return zscore(warped)


def select_view_indices(subject_segments, anchor_id, seed):
    """Pick the two same-subject segment ids feeding the ECG_aug / PPG_aug views.

    One segment yields ``(anchor, anchor)``, which tells the caller to synthesise.
    """
    ids = list(subject_segments)
    if anchor_id not in ids:
        raise ValueError(f"anchor {anchor_id} not among the subject's segments")
    if len(ids) == 1:
        return anchor_id, anchor_id
    if len(ids) == 2:
        return ids[0], ids[1]
    a, b = _rng(seed, 0x5E1).choice(len(ids), size=2, replace=False)
    return ids[a], ids[b]


def resolve_views(i_ecg, i_ppg, anchor, ecg_of, ppg_of, config, rng):
    """Turn selected indices into (ecg_aug, ppg_aug) sample arrays.

    ``ecg_of`` / ``ppg_of`` map a segment id to its samples.
    """
    if i_ecg == i_ppg == anchor:
        return augment_signal(ecg_of(anchor), config, rng), augment_signal(ppg_of(anchor), config, rng)
    if i_ecg == i_ppg:
        # a simultaneous alternate pair would be a trivial positive; perturb one side
        if rng.uniform() < 0.5:
            return augment_signal(ecg_of(i_ecg), config, rng), ppg_of(i_ppg)
        return ecg_of(i_ecg), augment_signal(ppg_of(i_ppg), config, rng)
    return ecg_of(i_ecg), ppg_of(i_ppg)


def views_for_row(dataset, row, config: AugmentConfig):
    """Augmented ECG/PPG sample arrays for the anchor at ``dataset`` row ``row``."""
    sid = int(dataset.subject_ids[row])
    rows = [int(r) for r in dataset.segments_of(sid)]
    seg = int(dataset.segment_indices[row])
    i_ecg, i_ppg = select_view_indices(rows, int(row), seed=hash((config.seed, sid, seg)))
    rng = _rng(config.seed, sid, seg, 0xB1E)
    ecg_of = lambda r: dataset.ecg[r].astype(np.float64)  # noqa: E731
    ppg_of = lambda r: dataset.ppg[r].astype(np.float64)  # noqa: E731
    return resolve_views(i_ecg, i_ppg, int(row), ecg_of, ppg_of, config, rng)


def make_views(pair, dataset, config: AugmentConfig):
    """(ecg_aug, ppg_aug) segments for ``pair``, which must be a member of ``dataset``."""
    hit = np.flatnonzero((dataset.subject_ids == pair.subject_id)
                         & (dataset.segment_indices == pair.segment_index))
    if hit.size == 0:
        raise ValueError(f"pair ({pair.subject_id}, {pair.segment_index}) not in dataset")
    ecg, ppg = views_for_row(dataset, int(hit[0]), config)
    return (SignalSegment(ECG, pair.subject_id, pair.segment_index, ecg),
            SignalSegment(PPG, pair.subject_id, pair.segment_index, ppg))
