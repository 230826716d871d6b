"""Train the desk preset and compare it with the exact oracle on the validation set.

    python3 scripts/train_desk.py --out-dir runs/desk --seed 0
"""

import argparse
import logging
import statistics

from mmfl.baselines import exact_solve
from mmfl.training import PRESETS, train, validation_set, with_overrides


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out-dir", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = with_overrides(PRESETS["desk"], seed=args.seed, epochs=args.epochs)
    _, log = train(cfg, args.out_dir)
    oracle = statistics.fmean(exact_solve(x).cost for x in validation_set(cfg))
    initial, final = log.initial_val_cost, log.records[-1].val_cost
    print(f"untrained {initial:.4f}")
    print(f"trained   {final:.4f}  ({(initial - final) / initial * 100:.1f}% better)")
    print(f"exact     {oracle:.4f}")
    print(f"convergence curve: {args.out_dir}/train_log.csv")


if __name__ == "__main__":
    main()
