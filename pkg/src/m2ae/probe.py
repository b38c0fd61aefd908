"""Frozen-encoder fingerprints, cross-modal reconstruction, linear probes and metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import M2AEError, ShapeError
from .kernels import concordance
from .model import (
    MODALITIES, Builder, decode_modality, encode_modality, fingerprint, merge_bottleneck,
    patchify, sample_mask_plan, unpatchify,
)
from .training import OptimizerState, adam_update

log = logging.getLogger(__name__)

SOURCES = ("ecg", "ppg", "paired")
TASKS = ("binary", "multiclass", "regression")
PAIRED_RATIO = 0.5
PAIRED_SEED = 0
DIRECTIONS = {"ecg2ppg": ("ecg", "ppg"), "ppg2ecg": ("ppg", "ecg")}

REGRESSION_METRICS = ("mae", "rmse", "r2", "pearson")
CLASSIFICATION_METRICS = ("auroc", "auprc", "f1", "accuracy", "precision", "recall")


class ModalityMismatchError(M2AEError):
    pass


class SingleClassError(M2AEError):
    pass


class OneClassPresentError(M2AEError):
    pass


def _check_params(params, cfg, modalities, segment_len):
    if segment_len != cfg.segment_len:
        raise ModalityMismatchError(
            f"checkpoint expects segments of length {cfg.segment_len}, got {segment_len}")
    for m in modalities:
        if f"{m}.embed.w" not in params:
            raise ModalityMismatchError(f"checkpoint has no {m} encoder")


def _chunks(n, size):
    for lo in range(0, n, size):
        yield slice(lo, min(n, lo + size))


# -- fingerprints -----------------------------------------------------------

@dataclass
class FingerprintSet:
    subject_ids: np.ndarray
    segment_indices: np.ndarray
    source: str
    vectors: np.ndarray  # (n, d_enc)

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.segment_indices = np.asarray(self.segment_indices, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.subject_ids):
            raise ShapeError(f"fingerprints {self.vectors.shape} vs {len(self.subject_ids)} keys")
        keys = set(zip(self.subject_ids.tolist(), self.segment_indices.tolist()))
        if len(keys) != len(self.subject_ids):
            raise ValueError("duplicate (subject_id, segment_index) keys")

    @property
    def d_enc(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.subject_ids)

    def keys(self):
        return list(zip(self.subject_ids.tolist(), self.segment_indices.tolist()))


def extract_fingerprints(params, cfg, dataset, source, rows=None, chunk=32):
    """Eval-mode fingerprints for ``rows`` of ``dataset`` (all rows by default)."""
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}, got {source!r}")
    modalities = MODALITIES if source == "paired" else (source,)
    _check_params(params, cfg, modalities, dataset.segment_len)
    rows = np.arange(len(dataset)) if rows is None else np.asarray(rows, dtype=np.int64)
    plan = sample_mask_plan(cfg.n_patches, PAIRED_RATIO, PAIRED_SEED) if source == "paired" else None
    out = []
    for sl in _chunks(len(rows), chunk):
        r = rows[sl]
        x = {m: patchify(getattr(dataset, m)[r].astype(np.float64), cfg.patch_size) for m in modalities}
        bld = Builder(cfg)
        z = {m: encode_modality(bld, ad.leaf(f"x.{m}"), m) for m in modalities}
        node = merge_bottleneck(z["ecg"], z["ppg"], plan) if plan else z[source]
        bind = {**params, **{f"x.{m}": v for m, v in x.items()}}
        out.append(fingerprint(ad.evaluate(node, bind)))
    vectors = np.concatenate(out) if out else np.zeros((0, cfg.d_enc))
    return FingerprintSet(dataset.subject_ids[rows], dataset.segment_indices[rows], source, vectors)


def write_fingerprints(path, fps: FingerprintSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "segment_index", "source"] + [f"f{j}" for j in range(fps.d_enc)])
        for sid, seg, vec in zip(fps.subject_ids, fps.segment_indices, fps.vectors):
            w.writerow([int(sid), int(seg), fps.source] + [repr(float(v)) for v in vec])


def read_fingerprints(path) -> FingerprintSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:3] != ["subject_id", "segment_index", "source"]:
        raise ValueError(f"{path}: not a fingerprint CSV")
    d = len(header) - 3
    sources = {r[2] for r in body}
    if len(sources) > 1:
        raise ValueError(f"{path}: mixed sources {sorted(sources)}")
    return FingerprintSet(
        [int(r[0]) for r in body], [int(r[1]) for r in body],
        sources.pop() if sources else "ecg",
        np.array([[float(v) for v in r[3:]] for r in body]).reshape(len(body), d))


def read_labels(path):
    """(subject_id, segment_index) -> label from a ``subject_id,segment_index,label`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {(int(r["subject_id"]), int(r["segment_index"])): float(r["label"]) for r in reader}


# -- cross-modal reconstruction ---------------------------------------------

def _cross_graph(cfg, source, target):
    bld = Builder(cfg)
    x = ad.leaf(f"x.{source}")
    return decode_modality(bld, encode_modality(bld, x, source), target)


def _reconstruct(params, cfg, dataset, rows, source, target, chunk=32):
    rec = _cross_graph(cfg, source, target)
    out = []
    for sl in _chunks(len(rows), chunk):
        x = patchify(getattr(dataset, source)[rows[sl]].astype(np.float64), cfg.patch_size)
        out.append(unpatchify(ad.evaluate(rec, {**params, f"x.{source}": x})))
    return np.concatenate(out) if out else np.zeros((0, cfg.segment_len))


def waveform_mae(recon, target):
    """Per-sample mean absolute error over full waveforms, shape (n,)."""
    return np.mean(np.abs(np.asarray(recon) - np.asarray(target)), axis=-1)


@dataclass
class ReconstructionResult:
    reconstructions: np.ndarray  # (n, L)
    targets: np.ndarray
    mae: np.ndarray  # per segment
    params: dict = field(repr=False, default_factory=dict)

    @property
    def mean_mae(self):
        return float(np.mean(self.mae))


def finetune_decoder(params, cfg, dataset, train_rows, valid_rows, source, target,
                     lr=1e-3, epochs=20, batch_size=16, seed=0):
    """Train only the ``target`` decoder on full-sequence reconstruction.

    Keeps the epoch (including the untouched start) with the lowest validation MAE.
    """
    prefix = f"{target}.dec."
    trainable = sorted(n for n in params if n.startswith(prefix))
    frozen = {n: v for n, v in params.items() if n not in trainable}
    rec = _cross_graph(cfg, source, target)
    y = ad.leaf(f"y.{target}")
    n_rows = cfg.n_patches
    cur = {n: params[n] for n in trainable}
    opt = OptimizerState.zeros_like(cur)

    def val_mae(p):
        r = _reconstruct({**frozen, **p}, cfg, dataset, valid_rows, source, target)
        return float(np.mean(waveform_mae(r, getattr(dataset, target)[valid_rows])))

    best, best_mae = dict(cur), val_mae(cur)
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(train_rows)
        for sl in _chunks(len(order), batch_size):
            r = order[sl]
            xs = patchify(getattr(dataset, source)[r].astype(np.float64), cfg.patch_size)
            xt = patchify(getattr(dataset, target)[r].astype(np.float64), cfg.patch_size)
            loss = ad.sqnorm(rec - y) * (1.0 / (n_rows * len(r)))
            tape = ad.Tape(loss, {**frozen, **cur, f"x.{source}": xs, f"y.{target}": xt})
            cur, opt = adam_update(cur, tape.backward(trainable), opt, lr)
        mae = val_mae(cur)
        log.info("decoder finetune epoch %d val MAE %.4f", epoch + 1, mae)
        if mae < best_mae:
            best, best_mae = dict(cur), mae
    return {**frozen, **best}


def reconstruct_cross(params, cfg, dataset, direction, setting="frozen", eval_rows=None,
                      finetune=None):
    """Cross-modal reconstruction of ``eval_rows`` (default: the test split).

    ``finetune`` is a dict of keyword arguments for :func:`finetune_decoder` and
    may carry ``train_rows`` / ``valid_rows``; by default those are the dataset's
    train and valid splits.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {sorted(DIRECTIONS)}")
    if setting not in ("frozen", "decoder_finetune"):
        raise ValueError("setting must be 'frozen' or 'decoder_finetune'")
    source, target = DIRECTIONS[direction]
    _check_params(params, cfg, MODALITIES, dataset.segment_len)
    if eval_rows is None:
        eval_rows = dataset.rows("test")
    eval_rows = np.asarray(eval_rows, dtype=np.int64)
    used = params
    if setting == "decoder_finetune":
        kw = dict(finetune or {})
        train_rows = np.asarray(kw.pop("train_rows", None) if "train_rows" in kw else dataset.rows("train"))
        valid_rows = np.asarray(kw.pop("valid_rows", None) if "valid_rows" in kw else dataset.rows("valid"))
        if len(train_rows) == 0 or len(valid_rows) == 0:
            raise ValueError("decoder_finetune needs non-empty paired train and valid rows")
        used = finetune_decoder(params, cfg, dataset, train_rows, valid_rows, source, target, **kw)
    rec = _reconstruct(used, cfg, dataset, eval_rows, source, target)
    tgt = getattr(dataset, target)[eval_rows].astype(np.float64)
    return ReconstructionResult(rec, tgt, waveform_mae(rec, tgt), used)


# -- linear probe -----------------------------------------------------------

@dataclass
class ProbeModel:
    weights: np.ndarray  # (C, D) or (1, D)
    bias: np.ndarray
    task: str
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    classes: np.ndarray | None = None
    iterations: int = 0
    grad_norm: float = 0.0

    def __post_init__(self):
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("probe weights must be finite")

    def decision(self, x):
        xs = (np.asarray(x, dtype=np.float64) - self.feature_mean) / self.feature_scale
        return xs @ self.weights.T + self.bias

    def predict(self, x):
        """Regression values, positive-class probabilities, or (n, C) class probabilities."""
        z = self.decision(x)
        if self.task == "regression":
            return z[:, 0]
        if self.task == "binary":
            return 1.0 / (1.0 + np.exp(-z[:, 0]))
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def _probe_loss(task, n, n_out, l2):
    x, w, b = ad.leaf("x"), ad.leaf("w"), ad.leaf("b")
    z = x @ ad.transpose(w) + b  # (n, n_out)
    if task == "regression":
        data = ad.sqnorm(z - ad.leaf("y")) * (0.5 / n)
    else:
        logits = ad.concat([ad.const(np.zeros((n, 1))), z], axis=1) if task == "binary" else z
        data = (ad.sum_(ad.logsumexp(logits)) - ad.sum_(logits * ad.leaf("y"))) * (1.0 / n)
    return data + ad.sqnorm(w) * (0.5 * l2)


def fit_linear_probe(features, labels, task, l2=1e-2, seed=0, max_iter=10_000, tol=1e-6):
    """Full-batch gradient descent on standardised features (step 1/Lipschitz bound)."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n, d = x.shape
    if n < 3 or len(y) != n:
        raise ValueError("probe needs >= 3 samples with one label each")
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    xs = (x - mu) / sd

    classes = None
    if task == "regression":
        target, n_out, curv = y[:, None], 1, 1.0
    else:
        classes = np.unique(y)
        if len(classes) < 2:
            raise SingleClassError("classification probe needs at least two classes")
        if task == "binary":
            if len(classes) != 2:
                raise ValueError(f"binary task got {len(classes)} classes")
            target, n_out, curv = (y == classes[1]).astype(np.float64)[:, None], 1, 0.25
        else:
            target = (y[:, None] == classes[None, :]).astype(np.float64)
            n_out, curv = len(classes), 0.5

    aug = np.hstack([xs, np.ones((n, 1))])
    lipschitz = curv * np.linalg.norm(aug, 2) ** 2 / n + l2
    step = 1.0 / lipschitz
    rng = np.random.default_rng(seed)
    params = {"w": rng.normal(0.0, 1e-3, (n_out, d)), "b": np.zeros(n_out)}
    loss = _probe_loss(task, n, n_out, l2)
    data = {"x": xs, "y": target}
    gnorm, it = np.inf, 0
    for it in range(1, max_iter + 1):
        grads = ad.Tape(loss, {**data, **params}).backward(["w", "b"])
        gnorm = float(np.sqrt(sum(np.sum(g ** 2) for g in grads.values())))
        if gnorm < tol:
            break
        params = {k: params[k] - step * grads[k] for k in params}
    return ProbeModel(params["w"], params["b"], task, mu, sd, classes, it, gnorm)


# -- metrics ----------------------------------------------------------------

def auroc(scores, labels):
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise OneClassPresentError("AUROC needs both classes present")
    pos, neg = np.ascontiguousarray(s[y]), np.ascontiguousarray(s[~y])
    return float(concordance(pos, neg)) / (len(pos) * len(neg))


def auprc(scores, labels):
    """Average precision: sum over distinct thresholds of (recall step) x precision."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise OneClassPresentError("AUPRC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1)
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _prf(pred, true, classes):
    p, r, f = [], [], []
    for c in classes:
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        pc = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        p.append(pc)
        r.append(rc)
        f.append(2 * pc * rc / (pc + rc) if pc + rc else 0.0)
    return float(np.mean(p)), float(np.mean(r)), float(np.mean(f))


def compute_metrics(predictions, labels, task, classes=None):
    """Metric dict for ``task``.

    Binary predictions are positive-class scores (thresholded at 0.5); multiclass
    predictions are (n, C) scores, argmax'd, with one-vs-rest macro AUROC/AUPRC.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if task == "regression":
        err = p - y
        ss_res = float(np.sum(err ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        sp, sy = p.std(), y.std()
        return {
            "mae": float(np.mean(np.abs(err))),
            "rmse": float(np.sqrt(np.mean(err ** 2))),
            "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -np.inf),
            "pearson": float(np.mean((p - p.mean()) * (y - y.mean())) / (sp * sy)) if sp * sy > 0 else 0.0,
        }
    if task == "binary":
        pos = y == (np.max(y) if classes is None else classes[1])
        pred = p >= 0.5
        prec, rec, f1 = _prf(pred, pos, [True])
        return {"auroc": auroc(p, pos), "auprc": auprc(p, pos), "f1": f1,
                "accuracy": float(np.mean(pred == pos)), "precision": prec, "recall": rec}
    if task == "multiclass":
        classes = np.unique(y) if classes is None else np.asarray(classes)
        if p.ndim != 2 or p.shape[1] != len(classes):
            raise ShapeError(f"multiclass scores {p.shape} vs {len(classes)} classes")
        pred = classes[np.argmax(p, axis=1)]
        prec, rec, f1 = _prf(pred, y, classes)
        au = [auroc(p[:, j], y == c) for j, c in enumerate(classes)]
        ap = [auprc(p[:, j], y == c) for j, c in enumerate(classes)]
        return {"auroc": float(np.mean(au)), "auprc": float(np.mean(ap)), "f1": f1,
                "accuracy": float(np.mean(pred == y)), "precision": prec, "recall": rec}
    raise ValueError(f"task must be one of {TASKS}")


def format_report(metrics):
    return "".join(f"{k}: {v:.6g}\n" for k, v in metrics.items())


def parse_report(text):
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, v = line.split(":", 1)
            out[k.strip()] = float(v)
    return out


def write_report(path, metrics):
    Path(path).write_text(format_report(metrics))
