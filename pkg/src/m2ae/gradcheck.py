"""Finite-difference audit of the total-loss gradient, one line per parameter block."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig
from .losses import LossWeights
from .model import ModelConfig, init_params, sample_mask_plan
from .signals import make_dataset
from .training import assemble_batch, build_loss_graph, draw_mask_ratio

RTOL = 1e-4
ATOL = 1e-8  # below this absolute gap the difference is central-difference noise
H = 1e-5


@dataclass(frozen=True)
class BlockReport:
    name: str
    n_coords: int
    max_rel_err: float
    max_abs_err: float

    @property
    def ok(self):
        return self.max_rel_err <= RTOL


def rel_err(analytic, numeric):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ATOL / RTOL)


@contextlib.contextmanager
def corrupt_adjoint(op, factor=1.5):
    """Test hook: scale the backward rule of ``op`` so the audit must fail."""
    fwd, bwd = ad._RULES[op]

    def bad(g, v, out, ctx, a):
        return [None if x is None else x * factor for x in bwd(g, v, out, ctx, a)]

    ad._RULES[op] = (fwd, bad)
    try:
        yield
    finally:
        ad._RULES[op] = (fwd, bwd)


def audit_problem(cfg: ModelConfig, seed=0, batch_size=4, weights=LossWeights()):
    """(loss node, bindings, parameter names) for one cross-modal batch with dropout active."""
    ds = make_dataset(batch_size, 2, seed=seed, L=cfg.segment_len,
                      fs=cfg.segment_len / 10.0)
    rows = [int(r) for r in range(0, len(ds), 2)][:batch_size]
    batch = assemble_batch(ds, rows, cfg, AugmentConfig(seed=seed))
    r = draw_mask_ratio((0.1, 0.9), seed, 0)
    plan = sample_mask_plan(cfg.n_patches, r, [seed, 0xC4E])
    params = init_params(cfg, seed)
    nodes = build_loss_graph(cfg, "cross_modal", plan, len(rows), weights, True, seed)
    return nodes["total"], {**params, **batch.x}, sorted(params)


def audit(cfg: ModelConfig, seed=0, batch_size=4, n_coords=50):
    """Compare reverse-mode and central-difference gradients on sampled coordinates."""
    root, bindings, names = audit_problem(cfg, seed, batch_size)
    tape = ad.Tape(root, bindings)
    grads = tape.backward(names)
    rng = np.random.default_rng([seed, 0x6C])
    reports = []
    for name in names:
        base = np.asarray(bindings[name], dtype=np.float64)
        size = base.size
        coords = np.sort(rng.choice(size, size=min(n_coords, size), replace=False))
        x = base.copy().reshape(-1)
        numeric = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = x[i]
            x[i] = orig + H
            fp = float(tape.rerun(name, x.reshape(base.shape)))
            x[i] = orig - H
            fm = float(tape.rerun(name, x.reshape(base.shape)))
            x[i] = orig
            numeric[j] = (fp - fm) / (2 * H)
        analytic = grads[name].reshape(-1)[coords]
        reports.append(BlockReport(name, len(coords), float(rel_err(analytic, numeric).max()),
                                   float(np.abs(analytic - numeric).max())))
    return reports


def format_reports(reports):
    lines = [f"{'block':40s} {'coords':>6s} {'max_rel':>10s} {'max_abs':>10s}  status"]
    for r in reports:
        lines.append(f"{r.name:40s} {r.n_coords:6d} {r.max_rel_err:10.2e} {r.max_abs_err:10.2e}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    bad = sum(not r.ok for r in reports)
    lines.append(f"{len(reports)} blocks, {bad} failed")
    return "\n".join(lines)
