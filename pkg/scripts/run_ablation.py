"""Train the four ablation variants on one synthetic dataset and compare held-out metrics.

    python scripts/run_ablation.py --out runs/ablation
    python scripts/run_ablation.py --variants cmgm_agl baseline_cnn --epochs 8
"""

import argparse
import csv
import logging
import time
from pathlib import Path

from graftnet.config import VARIANTS, TrainConfig
from graftnet.data import read_manifest, synth_generate
from graftnet.train import evaluate_model, train, write_eval_csv


def dataset(root, n_train, n_val, hw, seed):
    root = Path(root)
    tr, va = root / "train" / "manifest.tsv", root / "val" / "manifest.tsv"
    if not tr.exists():
        synth_generate(n_train, hw, seed, tr.parent, split="train")
    if not va.exists():
        # disjoint seed stream for the held-out split
        synth_generate(n_val, hw, seed + 1000, va.parent, split="val")
    return read_manifest(tr, "train"), read_manifest(va, "val")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--n-train", type=int, default=500)
    ap.add_argument("--n-val", type=int, default=100)
    ap.add_argument("--hw", type=int, default=64)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=32)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    tr, va = dataset(out / "data", args.n_train, args.n_val, args.hw, args.seed)
    summary = []
    for variant in args.variants:
        cfg = TrainConfig(variant=variant, input_hw=args.hw, epochs=args.epochs, seed=args.seed)
        t0 = time.time()
        res = train(cfg, tr, out / variant, val_manifest=va)
        agg = write_eval_csv(evaluate_model(res.model, va), out / variant / "eval.csv")
        row = dict(variant=variant, mae=agg.mae, f_max=agg.f_max, s=agg.s_measure, e=agg.e_measure, bde=agg.bde)
        row["seconds"] = round(time.time() - t0, 1)
        summary.append(row)
        print(f"{variant:<14} mae {agg.mae:.4f}  f_max {agg.f_max:.4f}  s {agg.s_measure:.4f}  {row['seconds']}s", flush=True)

    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(summary[0]))
        wr.writeheader()
        wr.writerows(summary)


if __name__ == "__main__":
    main()
