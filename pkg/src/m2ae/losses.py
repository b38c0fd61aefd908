"""Masked reconstruction losses, four-view InfoNCE and the weighted total.

The ``*_node`` builders return autodiff graph nodes used in training; the
plain-named functions take numpy arrays and return floats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import MaskError, ShapeError

N_VIEWS = 4


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.1
    tau: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass(frozen=True)
class ViewEmbeddings:
    """Four (B, D) embedding sets in the order ECG, PPG, ECG_aug, PPG_aug."""

    ecg: np.ndarray
    ppg: np.ndarray
    ecg_aug: np.ndarray
    ppg_aug: np.ndarray
    tau: float = 0.1

    def __post_init__(self):
        shapes = {np.shape(v) for v in self.stacked_views()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ShapeError(f"views must share one (B, D) shape, got {shapes}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")

    def stacked_views(self):
        return (self.ecg, self.ppg, self.ecg_aug, self.ppg_aug)

    @property
    def batch(self):
        return np.shape(self.ecg)[0]


# -- reconstruction ---------------------------------------------------------

def recon_single_node(target, recon, rows, batch=1):
    if not rows:
        raise MaskError("masked reconstruction over an empty index set")
    return ad.sqnorm(ad.gather(recon - target, rows)) * (1.0 / (len(rows) * batch))


def recon_cross_nodes(target_ecg, recon_ecg, target_ppg, recon_ppg, plan, batch=1):
    """(ECG term scored on M, PPG term scored on U)."""
    if not plan.U or not plan.M:
        raise MaskError("cross-modal reconstruction needs non-empty U and M")
    return (recon_single_node(target_ecg, recon_ecg, plan.M, batch),
            recon_single_node(target_ppg, recon_ppg, plan.U, batch))


def recon_masked_node(target, recon, row_mask, batch):
    """Per-sample index sets given as a (B, k) 0/1 ``row_mask``; each row of the mask has
    the same count."""
    counts = np.asarray(row_mask).sum(axis=-1)
    if np.any(counts == 0) or np.ptp(counts) != 0:
        raise MaskError("per-sample masks need equal, non-zero row counts")
    w = ad.const(np.asarray(row_mask, dtype=np.float64)[..., None])
    return ad.sqnorm((recon - target) * w) * (1.0 / (float(counts[0]) * batch))


def _batchify(*arrays):
    out = [np.asarray(a, dtype=np.float64) for a in arrays]
    return [a[None] if a.ndim == 2 else a for a in out]


def recon_loss_cross(target_ecg, recon_ecg, target_ppg, recon_ppg, plan):
    te, re, tp, rp = _batchify(target_ecg, recon_ecg, target_ppg, recon_ppg)
    le, lp = recon_cross_nodes(ad.const(te), ad.const(re), ad.const(tp), ad.const(rp), plan, te.shape[0])
    return float(ad.evaluate(le, {})) + float(ad.evaluate(lp, {}))


def recon_loss_single(target, recon, plan):
    t, r = _batchify(target, recon)
    return float(ad.evaluate(recon_single_node(ad.const(t), ad.const(r), plan.M, t.shape[0]), {}))


# -- contrastive ------------------------------------------------------------

def similarity(z_i, z_j, tau):
    """Raw dot product over temperature."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z_i, z_j = np.asarray(z_i, dtype=np.float64), np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape:
        raise ShapeError("similarity needs equal-length vectors")
    return float(z_i @ z_j) / tau


def _view_masks(batch):
    """Denominator mask (everything but self) and positive mask (same sample, other view)."""
    n = N_VIEWS * batch
    sample = np.arange(n) % batch
    denom = ~np.eye(n, dtype=bool)
    pos = (sample[:, None] == sample[None, :]) & denom
    return denom, pos


def contrastive_node(views, tau, batch):
    """Mean over all 4B anchors of the three-positive InfoNCE term.

    ``views`` are four (B, D) nodes. Stacked rows are view-major: row ``v * B + i``
    is sample ``i`` in view ``v``.
    """
    if batch < 2:
        raise ShapeError("contrastive loss needs B >= 2 (negatives come from other samples)")
    z = ad.concat(list(views), axis=0)
    sim = (z @ ad.transpose(z)) * (1.0 / tau)
    denom, pos = _view_masks(batch)
    lse = ad.logsumexp(sim, mask=denom)
    n = N_VIEWS * batch
    # each anchor: -(1/3) sum_pos s + lse; averaged over n anchors
    pos_term = ad.sum_(sim * ad.const(pos.astype(np.float64))) * (-1.0 / ((N_VIEWS - 1) * n))
    return pos_term + ad.sum_(lse) * (1.0 / n)


def _sim_matrix(views: ViewEmbeddings):
    z = np.concatenate([np.asarray(v, dtype=np.float64) for v in views.stacked_views()], axis=0)
    return z @ z.T / views.tau


def infonce_anchor(views: ViewEmbeddings, i, v):
    """Loss for anchor sample ``i`` in view ``v`` (0-based, order ECG, PPG, ECG_aug, PPG_aug)."""
    B = views.batch
    if B < 2:
        raise ShapeError("contrastive loss needs B >= 2 (negatives come from other samples)")
    if not (0 <= i < B and 0 <= v < N_VIEWS):
        raise IndexError(f"anchor ({i}, {v}) out of range for B={B}")
    s = _sim_matrix(views)
    a = v * B + i
    row = np.delete(s[a], a)
    mx = row.max()
    lse = mx + np.log(np.exp(row - mx).sum())
    pos = [s[a, u * B + i] for u in range(N_VIEWS) if u != v]
    return float(-np.mean([p - lse for p in pos]))


def contrastive_loss(views: ViewEmbeddings):
    B = views.batch
    nodes = [ad.const(v) for v in views.stacked_views()]
    return float(ad.evaluate(contrastive_node(nodes, views.tau, B), {}))


def total_loss(contrast, recon, lam):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return contrast + lam * recon
