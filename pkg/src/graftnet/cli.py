"""``graftnet`` command line: train, eval, infer, gradcheck, synth, stats."""

from __future__ import annotations

import argparse
import logging
import os
import sys


def _limit_blas_threads():
    # must run before numpy is imported; GRAFTNET_THREADS also caps the data loader
    n = os.environ.get("GRAFTNET_THREADS")
    if n:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def cmd_train(args):
    from .config import TrainConfig, load_config
    from .data import read_manifest
    from .train import train

    overrides = {"unlink_lr": True} if args.unlink_lr else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = load_config(args.config, **overrides) if args.config else TrainConfig(**overrides)
    val = read_manifest(args.val, "val") if args.val else None
    res = train(cfg, read_manifest(args.data, "train"), args.out, val_manifest=val, max_steps=args.max_steps)
    print(f"steps {len(res.loss_rows)}  final loss {res.loss_rows[-1]['total']:.5f}  val_mae {res.final_val_mae:.4f}")
    return 0


def cmd_eval(args):
    from .data import read_manifest
    from .train import eval_checkpoint

    agg = eval_checkpoint(args.ckpt, read_manifest(args.data, "test"), args.csv)
    print(f"mae {agg.mae:.4f}  f_max {agg.f_max:.4f}  s {agg.s_measure:.4f}  e {agg.e_measure:.4f}  bde {agg.bde:.3f}")
    return 0


def cmd_infer(args):
    from .train import infer

    infer(args.ckpt, args.image, args.out)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite, suite

    names = set(args.op) if args.op else None
    if names:
        unknown = names - {c.name for c in suite()}
        if unknown:
            print(f"unknown check(s): {', '.join(sorted(unknown))}", file=sys.stderr)
            return 2
    results = run_suite(names, seeds=range(args.seeds))
    failed = [n for n, (err, tol) in results.items() if not err < tol]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_synth(args):
    from .data import synth_generate

    man = synth_generate(args.n, args.hw, args.seed, args.out, args.difficulty)
    print(f"wrote {len(man)} samples to {args.out}/manifest.tsv")
    return 0


def cmd_stats(args):
    from .data import dataset_stats, read_manifest, write_histogram_csv, write_stats_csv

    rows = dataset_stats(read_manifest(args.data))
    write_stats_csv(rows, args.csv)
    if args.hist:
        write_histogram_csv([r["log10_edge_pixels"] for r in rows], args.hist)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="graftnet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint directory")
    p.add_argument("--config", help="key = value config file (defaults when omitted)")
    p.add_argument("--data", required=True, help="training manifest.tsv")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--val", help="held-out manifest; otherwise val_fraction of --data is held out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--unlink-lr", action="store_true", help="keep lr_other as configured instead of 10x lr_backbone_attn")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="saliency map for one PPM/PGM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference checks; exits 1 on any failure")
    p.add_argument("--op", action="append", help="run only this check (repeatable)")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--hw", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--difficulty", choices=("blob", "thin", "mixed"), default="mixed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("stats", help="per-sample boundary statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--hist", help="also write a histogram of log10 edge-pixel counts")
    p.set_defaults(fn=cmd_stats)
    return ap


def main(argv=None):
    _limit_blas_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .errors import GraftError

    try:
        return args.fn(args)
    except (GraftError, OSError, ValueError) as e:
        print(f"graftnet {args.cmd}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
