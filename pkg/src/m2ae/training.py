"""Pretraining loop: per-batch complementary masking, augmented views, Adam,
plateau learning-rate schedule, early stopping and checkpointing."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, views_for_row
from .errors import NonFiniteError, ShapeError
from .losses import LossWeights, contrastive_node, recon_cross_nodes, recon_masked_node, recon_single_node
from .model import (Builder, MaskPlan, ModelConfig, decode_modality, embed_patches,
                    encode_rows, init_params, load_checkpoint, merge_bottleneck, merge_bottleneck_masked,
                    patchify, pool, round_half_away, sample_mask_plan, save_checkpoint, single_modal_graph)

log = logging.getLogger(__name__)

MODES = ("cross_modal", "single_modal_ecg", "single_modal_ppg")
LOG_HEADER = ["epoch", "lr", "train_total", "train_contrast", "train_recon_ecg", "train_recon_ppg", "val_total"]
SINGLE_MODAL_RATIO = 0.5
VALID_SEED = 0x7A11D


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    scheduler_factor: float = 0.5
    scheduler_patience: int = 2
    early_stop_patience: int = 5
    max_epochs: int = 30
    mask_ratio_range: tuple = (0.1, 0.9)
    seed: int = 0
    mode: str = "cross_modal"
    per_sample_plans: bool = False

    def __post_init__(self):
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must be in (0, 1)")
        lo, hi = self.mask_ratio_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"mask ratio range {self.mask_ratio_range} must lie inside (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive negatives)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


# -- optimiser --------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params, grads, state: OptimizerState, lr):
    """Bias-corrected Adam step on every parameter that has a gradient."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_p[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_p, replace(state, m=new_m, v=new_v, step=t)


# -- schedule / stopping ----------------------------------------------------

@dataclass
class SchedulerState:
    current_lr: float
    best_validation_loss: float = float("inf")
    epochs_since_improvement: int = 0


def scheduler_step(state: SchedulerState, validation_loss, factor=0.5, patience=2):
    """Reduce-on-plateau: strict improvement resets; ``patience`` misses multiply lr by ``factor``."""
    if validation_loss < state.best_validation_loss:
        return SchedulerState(state.current_lr, validation_loss, 0)
    count = state.epochs_since_improvement + 1
    if count >= patience:
        return SchedulerState(state.current_lr * factor, state.best_validation_loss, 0)
    return SchedulerState(state.current_lr, state.best_validation_loss, count)


def early_stop_check(history, patience):
    """True when none of the last ``patience`` losses strictly beats the best before them."""
    if len(history) <= patience:
        return False
    return min(history[-patience:]) >= min(history[:-patience])


def draw_mask_ratio(ratio_range, seed, batch_index):
    lo, hi = ratio_range
    return float(np.random.default_rng([int(seed), int(batch_index), 0x3A5]).uniform(lo, hi))


# -- batching ---------------------------------------------------------------

def make_batches(dataset, rows, batch_size, seed):
    """Batches of dataset rows with no subject repeated inside a batch.

    Subjects with the most remaining segments are served first (random tie-break),
    so every row is used once per pass. Batches smaller than 2 are dropped.
    """
    rng = np.random.default_rng(seed)
    pools = {}
    for r in rows:
        pools.setdefault(int(dataset.subject_ids[r]), []).append(int(r))
    for sid in pools:
        rng.shuffle(pools[sid])
    batches = []
    while pools:
        subjects = list(pools)
        jitter = rng.random(len(subjects))
        order = sorted(range(len(subjects)), key=lambda j: (-len(pools[subjects[j]]), jitter[j]))
        chosen = [subjects[j] for j in order[:batch_size]]
        batch = [pools[s].pop() for s in chosen]
        for s in chosen:
            if not pools[s]:
                del pools[s]
        if len(batch) >= 2:
            batches.append(batch)
    rng.shuffle(batches)
    return batches


@dataclass
class Batch:
    rows: list
    x: dict  # leaf name -> (B, k, s) patches

    @property
    def size(self):
        return len(self.rows)


def assemble_batch(dataset, rows, cfg: ModelConfig, augment: AugmentConfig | None):
    x = {
        "x.ecg": patchify(dataset.ecg[rows].astype(np.float64), cfg.patch_size),
        "x.ppg": patchify(dataset.ppg[rows].astype(np.float64), cfg.patch_size),
    }
    if augment is not None:
        views = [views_for_row(dataset, r, augment) for r in rows]
        x["x.ecg_aug"] = patchify(np.array([v[0] for v in views]), cfg.patch_size)
        x["x.ppg_aug"] = patchify(np.array([v[1] for v in views]), cfg.patch_size)
    return Batch(list(rows), x)


# -- loss graphs ------------------------------------------------------------

def cross_modal_graph(bld: Builder, plan, batch_size, weights: LossWeights):
    """Total-loss graph for one batch; ``plan`` is a MaskPlan or a (B, k) ECG-visible 0/1 array.

    Returns a dict with ``total``, ``contrast``, ``recon_ecg``, ``recon_ppg`` nodes.
    """
    cfg = bld.cfg
    k, B = cfg.n_patches, batch_size
    xe, xp = ad.leaf("x.ecg"), ad.leaf("x.ppg")
    xe_aug, xp_aug = ad.leaf("x.ecg_aug"), ad.leaf("x.ppg_aug")

    def encode_pair(x, x_aug, m):
        e = embed_patches(bld, ad.concat([x, x_aug], axis=0), m)
        z = encode_rows(bld, e, m, k)
        return ad.gather(z, range(B), axis=0), ad.gather(z, range(B, 2 * B), axis=0)

    ze, ze_aug = encode_pair(xe, xe_aug, "ecg")
    zp, zp_aug = encode_pair(xp, xp_aug, "ppg")

    if isinstance(plan, MaskPlan):
        zc = merge_bottleneck(ze, zp, plan)
        rec_e, rec_p = decode_modality(bld, zc, "ecg"), decode_modality(bld, zc, "ppg")
        loss_e, loss_p = recon_cross_nodes(xe, rec_e, xp, rec_p, plan, B)
    else:
        visible = np.asarray(plan, dtype=np.float64)
        zc = merge_bottleneck_masked(ze, zp, visible)
        rec_e, rec_p = decode_modality(bld, zc, "ecg"), decode_modality(bld, zc, "ppg")
        loss_e = recon_masked_node(xe, rec_e, 1.0 - visible, B)
        loss_p = recon_masked_node(xp, rec_p, visible, B)

    contrast = contrastive_node([pool(ze), pool(zp), pool(ze_aug), pool(zp_aug)], weights.tau, B)
    total = contrast + (loss_e + loss_p) * weights.lam
    return {"total": total, "contrast": contrast, "recon_ecg": loss_e, "recon_ppg": loss_p}


def single_modal_loss_graph(bld: Builder, plan: MaskPlan, batch_size, modality):
    x = ad.leaf(f"x.{modality}")
    _, recon = single_modal_graph(bld, x, modality, plan)
    loss = recon_single_node(x, recon, plan.M, batch_size)
    # components this mode does not compute are logged as 0
    out = {"total": loss, "contrast": None, "recon_ecg": None, "recon_ppg": None}
    out[f"recon_{modality}"] = loss
    return out


def single_modal_plan(k, seed):
    n_masked = round_half_away(SINGLE_MODAL_RATIO * k)
    masked = np.random.default_rng(seed).choice(k, size=n_masked, replace=False).tolist()
    return MaskPlan(k, tuple(sorted(set(range(k)) - set(masked))), tuple(masked))


def build_loss_graph(cfg, mode, plan, batch_size, weights, train, seed):
    bld = Builder(cfg, train=train, seed=seed)
    if mode == "cross_modal":
        return cross_modal_graph(bld, plan, batch_size, weights)
    return single_modal_loss_graph(bld, plan, batch_size, mode.split("_")[-1])


def _components(tape, nodes):
    return {name: 0.0 if node is None else float(tape.value(node)) for name, node in nodes.items()}


def train_step(params, opt_state, batch: Batch, plan, weights, lr, cfg, mode="cross_modal",
               dropout_seed=0, step_index=None):
    """One forward/backward/Adam step. Returns (loss components, new params, new optimizer state)."""
    if batch.size < 2 and mode == "cross_modal":
        raise ShapeError("train_step needs a batch of at least 2")
    nodes = build_loss_graph(cfg, mode, plan, batch.size, weights, True, dropout_seed)
    try:
        tape = ad.Tape(nodes["total"], {**params, **batch.x})
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite loss at step {step_index}: {exc}") from None
    losses = _components(tape, nodes)
    grads = tape.backward(params.keys())
    params, opt_state = adam_update(params, grads, opt_state, lr)
    return losses, params, opt_state


def evaluate_loss(params, batch: Batch, plan, weights, cfg, mode="cross_modal"):
    nodes = build_loss_graph(cfg, mode, plan, batch.size, weights, False, 0)
    return _components(ad.Tape(nodes["total"], {**params, **batch.x}), nodes)


# -- plan helpers -----------------------------------------------------------

def batch_plan(cfg: ModelConfig, tcfg: TrainConfig, batch_size, batch_key):
    k = cfg.n_patches
    if tcfg.mode != "cross_modal":
        return single_modal_plan(k, [tcfg.seed, batch_key, 0x51])
    r = draw_mask_ratio(tcfg.mask_ratio_range, tcfg.seed, batch_key)
    if tcfg.per_sample_plans:
        return np.stack([sample_mask_plan(k, r, [tcfg.seed, batch_key, j], *tcfg.mask_ratio_range).visible_mask
                         for j in range(batch_size)])
    return sample_mask_plan(k, r, [tcfg.seed, batch_key, 0x9A], *tcfg.mask_ratio_range)


def validation_plan(cfg: ModelConfig, mode, index):
    k = cfg.n_patches
    if mode != "cross_modal":
        return single_modal_plan(k, [VALID_SEED, index])
    return sample_mask_plan(k, 0.5, [VALID_SEED, index])


# -- pretraining ------------------------------------------------------------

@dataclass
class TrainState:
    params: dict
    opt: OptimizerState
    sched: SchedulerState
    epoch: int = 0
    val_history: list = field(default_factory=list)
    best_params: dict | None = None
    log_rows: list = field(default_factory=list)


def _needs_views(mode):
    return mode == "cross_modal"


def validation_batches(dataset, cfg, tcfg, augment):
    rows = dataset.rows("valid")
    aug = replace(augment, seed=VALID_SEED) if _needs_views(tcfg.mode) else None
    return [assemble_batch(dataset, b, cfg, aug) for b in make_batches(dataset, rows, tcfg.batch_size, VALID_SEED)]


def validation_loss(params, batches, cfg, tcfg, weights):
    total, n = 0.0, 0
    for i, batch in enumerate(batches):
        plan = validation_plan(cfg, tcfg.mode, i)
        total += evaluate_loss(params, batch, plan, weights, cfg, tcfg.mode)["total"] * batch.size
        n += batch.size
    return total / n


def run_epoch(state: TrainState, dataset, cfg, tcfg, weights, augment):
    """One pass over the training split; returns mean loss components."""
    epoch = state.epoch
    rows = dataset.rows("train")
    batches = make_batches(dataset, rows, tcfg.batch_size, [tcfg.seed, epoch, 0xBA7])
    sums = dict.fromkeys(("total", "contrast", "recon_ecg", "recon_ppg"), 0.0)
    n = 0
    lr = state.sched.current_lr
    for b, rows_b in enumerate(batches):
        key = epoch * 100_000 + b
        aug = replace(augment, seed=augment.seed * 7919 + key) if _needs_views(tcfg.mode) else None
        batch = assemble_batch(dataset, rows_b, cfg, aug)
        plan = batch_plan(cfg, tcfg, batch.size, key)
        losses, state.params, state.opt = train_step(
            state.params, state.opt, batch, plan, weights, lr, cfg, tcfg.mode,
            dropout_seed=tcfg.seed * 1_000_003 + key, step_index=state.opt.step)
        for name in sums:
            sums[name] += losses[name] * batch.size
        n += batch.size
    return {name: v / n for name, v in sums.items()}


def initial_params(cfg, tcfg):
    if tcfg.mode == "cross_modal":
        return init_params(cfg, tcfg.seed)
    return init_params(cfg, tcfg.seed, modalities=(tcfg.mode.split("_")[-1],), mask_tokens=True)


def new_state(params, tcfg):
    return TrainState(params, OptimizerState.zeros_like(params), SchedulerState(tcfg.learning_rate))


def pretrain(dataset, cfg: ModelConfig, tcfg: TrainConfig, weights: LossWeights,
             augment: AugmentConfig | None = None, out_dir=None, state: TrainState | None = None,
             params=None):
    """Train until ``max_epochs`` or early stop. Returns the final TrainState
    (``best_params`` holds the lowest-validation-loss parameters)."""
    augment = augment or AugmentConfig()
    if not dataset.split:
        raise ValueError("dataset has no subject split; run split_by_subject first")
    if state is None:
        state = new_state(params if params is not None else initial_params(cfg, tcfg), tcfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    val_batches = validation_batches(dataset, cfg, tcfg, augment)
    if not val_batches:
        raise ValueError("validation split yields no batch of size >= 2")

    while state.epoch < tcfg.max_epochs:
        lr = state.sched.current_lr
        train = run_epoch(state, dataset, cfg, tcfg, weights, augment)
        val = validation_loss(state.params, val_batches, cfg, tcfg, weights)
        state.epoch += 1
        row = [state.epoch, lr, train["total"], train["contrast"], train["recon_ecg"], train["recon_ppg"], val]
        state.log_rows.append(row)
        log.info("epoch %d lr %.3g train %.4f val %.4f", state.epoch, lr, train["total"], val)
        if not state.val_history or val < min(state.val_history):
            state.best_params = dict(state.params)
            if out is not None:
                save_checkpoint(out / "best.m2ck", cfg, state.best_params)
        state.val_history.append(val)
        state.sched = scheduler_step(state.sched, val, tcfg.scheduler_factor, tcfg.scheduler_patience)
        if out is not None:
            save_state(out / "last.m2ck", cfg, state)
            write_log(out / "log.csv", state.log_rows)
        if early_stop_check(state.val_history, tcfg.early_stop_patience):
            log.info("early stop after epoch %d", state.epoch)
            break
    return state


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- resumable state --------------------------------------------------------

def save_state(path, cfg, state: TrainState):
    blocks = dict(state.params)
    blocks.update({f"opt.m.{k}": v for k, v in state.opt.m.items()})
    blocks.update({f"opt.v.{k}": v for k, v in state.opt.v.items()})
    blocks["opt.step"] = np.array(float(state.opt.step))
    blocks["sched.lr"] = np.array(state.sched.current_lr)
    blocks["sched.best"] = np.array(min(state.sched.best_validation_loss, np.finfo(float).max))
    blocks["sched.count"] = np.array(float(state.sched.epochs_since_improvement))
    blocks["train.epoch"] = np.array(float(state.epoch))
    blocks["train.val_history"] = np.asarray(state.val_history, dtype=np.float64)
    blocks["train.log"] = np.asarray(state.log_rows, dtype=np.float64).reshape(-1, len(LOG_HEADER))
    save_checkpoint(path, cfg, blocks)


def load_state(path):
    """Inverse of :func:`save_state`; returns (ModelConfig, TrainState)."""
    cfg, blocks = load_checkpoint(path)
    params = {k: v for k, v in blocks.items() if not k.split(".")[0] in ("opt", "sched", "train")}
    opt = OptimizerState({k: blocks[f"opt.m.{k}"] for k in params}, {k: blocks[f"opt.v.{k}"] for k in params},
                         int(blocks["opt.step"]))
    best = float(blocks["sched.best"])
    sched = SchedulerState(float(blocks["sched.lr"]), float("inf") if best == np.finfo(float).max else best,
                           int(blocks["sched.count"]))
    log_rows = [[int(r[0])] + [float(x) for x in r[1:]] for r in blocks["train.log"]]
    state = TrainState(params, opt, sched, int(blocks["train.epoch"]),
                       [float(v) for v in blocks["train.val_history"]], None, log_rows)
    return cfg, state


def warm_start_init(cross_params, ecg_ckpt, ppg_ckpt):
    """Copy single-modal encoder/decoder weights into cross-modal params by name.

    Blocks only present in the sources (mask tokens) are skipped; shape mismatches raise.
    """
    out = dict(cross_params)
    for source in (ecg_ckpt, ppg_ckpt):
        blocks = load_checkpoint(source)[1] if isinstance(source, (str, Path)) else source
        for name, arr in blocks.items():
            if name not in out:
                continue
            if out[name].shape != arr.shape:
                raise ShapeError(f"warm start: block {name!r} has shape {arr.shape}, expected {out[name].shape}")
            out[name] = np.array(arr, copy=True)
    return out


def masked_recon_mse(params, dataset, rows, cfg, seed=0, r=0.5, batch_size=16):
    """Per-element MSE (z-units^2) on masked patches: ECG over M rows, PPG over U rows."""
    sums, counts = np.zeros(2), np.zeros(2)
    for i, b in enumerate(make_batches(dataset, rows, batch_size, seed)):
        plan = sample_mask_plan(cfg.n_patches, r, [seed, i])
        batch = assemble_batch(dataset, b, cfg, None)
        bld = Builder(cfg)
        ze = encode_rows(bld, embed_patches(bld, ad.leaf("x.ecg"), "ecg"), "ecg", cfg.n_patches)
        zp = encode_rows(bld, embed_patches(bld, ad.leaf("x.ppg"), "ppg"), "ppg", cfg.n_patches)
        zc = merge_bottleneck(ze, zp, plan)
        rec_e, rec_p = decode_modality(bld, zc, "ecg"), decode_modality(bld, zc, "ppg")
        tape = ad.Tape(ad.concat([ad.reshape(rec_e, (-1,)), ad.reshape(rec_p, (-1,))]), {**params, **batch.x})
        err_e = (tape.value(rec_e) - batch.x["x.ecg"])[:, list(plan.M)]
        err_p = (tape.value(rec_p) - batch.x["x.ppg"])[:, list(plan.U)]
        sums += [np.sum(err_e ** 2), np.sum(err_p ** 2)]
        counts += [err_e.size, err_p.size]
    return tuple(sums / counts)


