"""Train cmgm_agl once per grafting pair (R5 with S1..S4) and report held-out metrics."""

import argparse
import csv
import logging
from pathlib import Path

from graftnet.config import GRAFT_PAIRS, TrainConfig
from graftnet.train import evaluate_model, train, write_eval_csv

from run_ablation import dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/graft_pairs")
    ap.add_argument("--pairs", nargs="+", default=list(GRAFT_PAIRS), choices=GRAFT_PAIRS)
    ap.add_argument("--hw", type=int, default=64)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=32)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    tr, va = dataset(out / "data", 500, 100, args.hw, args.seed)
    rows = []
    for pair in args.pairs:
        cfg = TrainConfig(graft_pair=pair, input_hw=args.hw, epochs=args.epochs, seed=args.seed)
        res = train(cfg, tr, out / pair, val_manifest=va)
        agg = write_eval_csv(evaluate_model(res.model, va), out / pair / "eval.csv")
        rows.append({"pair": pair, "mae": agg.mae, "f_max": agg.f_max, "s": agg.s_measure, "e": agg.e_measure})
        print(f"{pair}  mae {agg.mae:.4f}  f_max {agg.f_max:.4f}", flush=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


if __name__ == "__main__":
    main()
