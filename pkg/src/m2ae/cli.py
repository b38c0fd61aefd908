"""``m2ae`` command-line entry point.

Exit codes: 0 success, 1 internal or numerical failure, 2 invalid input/config.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import probe
from .config import load_config
from .errors import M2AEError, NonFiniteError
from .model import load_checkpoint, save_checkpoint
from .signals import load_dataset, make_dataset, save_dataset, split_by_subject, split_counts
from .training import MODES, pretrain

log = logging.getLogger("m2ae")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


def _split(dataset, cfg):
    return split_by_subject(dataset, cfg.data.split, cfg.data.split_seed)


def _params(ckpt):
    cfg, blocks = load_checkpoint(ckpt)
    # a last-state checkpoint also carries optimiser/scheduler blocks
    return cfg, {k: v for k, v in blocks.items() if not k.startswith(("opt.", "sched.", "train."))}


def cmd_gen_data(args):
    cfg = load_config(args.config, args.set)
    ds = make_dataset(args.subjects, args.pairs_per_subject, seed=args.seed)
    _split(ds, cfg)  # surfaces the too-few-subjects error before writing
    save_dataset(ds, args.out)
    n_train, n_valid, n_test = split_counts(args.subjects, cfg.data.split)
    print(f"wrote {len(ds)} pairs from {args.subjects} subjects to {args.out}")
    print(f"split (seed {cfg.data.split_seed}): train {n_train}, valid {n_valid}, test {n_test} subjects")


def cmd_pretrain(args):
    overrides = list(args.set)
    if args.mode:
        overrides.append(f"train.mode={args.mode}")
    cfg = load_config(args.config, overrides)
    ds = _split(load_dataset(args.data), cfg)
    state = pretrain(ds, cfg.model, cfg.train, cfg.loss, cfg.augment, out_dir=args.out)
    Path(args.out, "config.txt").write_text(cfg.to_text())
    print(f"trained {state.epoch} epochs; best validation loss {min(state.val_history):.6g}")
    print(f"checkpoints and log in {args.out}")


def cmd_extract(args):
    cfg, params = _params(args.ckpt)
    ds = load_dataset(args.data)
    fps = probe.extract_fingerprints(params, cfg, ds, args.source)
    probe.write_fingerprints(args.out, fps)
    print(f"wrote {len(fps)} fingerprints of dimension {fps.d_enc} to {args.out}")


def cmd_reconstruct(args):
    run_cfg = load_config(args.config, args.set)
    cfg, params = _params(args.ckpt)
    ds = _split(load_dataset(args.data), run_cfg)
    setting = "decoder_finetune" if args.setting == "finetune" else "frozen"
    ft = {"lr": args.lr, "epochs": args.epochs, "seed": args.seed}
    res = probe.reconstruct_cross(params, cfg, ds, args.direction, setting, finetune=ft)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ds.rows("test")
    for row, tgt, rec, mae in zip(rows, res.targets, res.reconstructions, res.mae):
        sid, seg = int(ds.subject_ids[row]), int(ds.segment_indices[row])
        with open(out / f"{args.direction}_s{sid}_seg{seg}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "target", "reconstruction"])
            w.writerows([i, repr(float(a)), repr(float(b))] for i, (a, b) in enumerate(zip(tgt, rec)))
    if setting == "decoder_finetune":
        save_checkpoint(out / "finetuned.m2ck", cfg, res.params)
    report = {"mae": res.mean_mae, "n_segments": float(len(rows))}
    probe.write_report(out / "mae.txt", report)
    print(f"{args.direction} {args.setting}: MAE {res.mean_mae:.6g} over {len(rows)} held-out segments")


def _subject_holdout(subject_ids, fraction, seed):
    subjects = np.unique(subject_ids)
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(fraction * len(subjects))))
    test = set(rng.permutation(subjects)[:n_test].tolist())
    mask = np.array([s in test for s in subject_ids])
    return ~mask, mask


def cmd_probe(args):
    fps = probe.read_fingerprints(args.fingerprints)
    labels = probe.read_labels(args.labels)
    missing = [k for k in fps.keys() if k not in labels]
    if missing:
        raise M2AEError(f"{len(missing)} fingerprints have no label, e.g. {missing[0]}")
    y = np.array([labels[k] for k in fps.keys()])
    train, test = _subject_holdout(fps.subject_ids, args.test_fraction, args.seed)
    if not train.any() or not test.any():
        raise M2AEError("hold-out split left an empty side; need more subjects")
    model = probe.fit_linear_probe(fps.vectors[train], y[train], args.task, l2=args.l2, seed=args.seed)
    metrics = probe.compute_metrics(model.predict(fps.vectors[test]), y[test], args.task, model.classes)
    probe.write_report(args.out, metrics)
    print(probe.format_report(metrics), end="")


def cmd_gradcheck(args):
    cfg = load_config(args.config, args.set)
    if args.corrupt_adjoint:
        with gc.corrupt_adjoint(args.corrupt_adjoint):
            reports = gc.audit(cfg.model, args.seed, args.batch_size, args.coords)
    else:
        reports = gc.audit(cfg.model, args.seed, args.batch_size, args.coords)
    print(gc.format_reports(reports))
    return EXIT_OK if all(r.ok for r in reports) else EXIT_INTERNAL


def build_parser():
    parser = argparse.ArgumentParser(prog="m2ae", description="Cross-modal ECG/PPG masked autoencoder.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value run config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        return p

    p = with_config(sub.add_parser("gen-data", help="write a synthetic paired dataset"))
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--pairs-per-subject", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("pretrain", help="pretrain on a dataset file"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=MODES, help="shorthand for --set train.mode=...")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="frozen-encoder fingerprints to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--source", choices=probe.SOURCES, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = with_config(sub.add_parser("reconstruct", help="cross-modal reconstruction on the test split"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=sorted(probe.DIRECTIONS), required=True)
    p.add_argument("--setting", choices=("frozen", "finetune"), required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=20, help="decoder fine-tuning epochs")
    p.add_argument("--lr", type=float, default=1e-3, help="decoder fine-tuning learning rate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("probe", help="fit a linear probe on fingerprints and report metrics")
    p.add_argument("--fingerprints", required=True)
    p.add_argument("--labels", required=True, help="CSV with subject_id,segment_index,label")
    p.add_argument("--task", choices=probe.TASKS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--l2", type=float, default=1e-2)
    p.add_argument("--test-fraction", type=float, default=0.3, help="share of subjects held out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference audit of the loss gradient"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--coords", type=int, default=50, help="coordinates sampled per parameter block")
    p.add_argument("--corrupt-adjoint", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except NonFiniteError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (M2AEError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return rc if isinstance(rc, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
