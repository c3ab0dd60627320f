"""Desk-scale grid on the digits IDX pair: strategies x slow fractions x seeds.

Writes one CSV row per run and prints per-cell means. Export the data first with
``scripts/export_digits_idx.py``.
"""

import argparse
import csv
import dataclasses
import time
from collections import defaultdict

import numpy as np

from fedprune.config import parse_config
from fedprune.federation import run_experiment


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/digits.json")
    parser.add_argument("--strategies", nargs="+", default=["fedavg", "fedprune_no_clt", "fedprune", "small_model"])
    parser.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.5, 0.9])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", default="desk_scale.csv")
    args = parser.parse_args()

    base = parse_config(args.config)
    cells = defaultdict(list)
    start = time.perf_counter()
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "slow_fraction", "seed", "final_acc_mean", "final_acc_std"])
        for frac in args.fractions:
            for strategy in args.strategies:
                for seed in args.seeds:
                    cfg = dataclasses.replace(base, strategy=strategy, slow_fraction=frac, seed=seed)
                    final = run_experiment(cfg).final
                    writer.writerow([strategy, frac, seed, repr(final.acc_mean), repr(final.acc_std)])
                    cells[strategy, frac].append((final.acc_mean, final.acc_std))
                acc, std = np.mean(cells[strategy, frac], axis=0)
                print(f"{frac:.1f} {strategy:16s} acc {acc:.3f} std {std:.3f}  [{time.perf_counter() - start:.0f}s]",
                      flush=True)


if __name__ == "__main__":
    main()
