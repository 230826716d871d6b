"""Full model against its disable_fusion and disable_image variants, same budget and seed.

    python3 scripts/ablation.py --out-dir runs/ablation
"""

import argparse
import csv
import logging
from pathlib import Path

from mmfl.training import PRESETS, train, with_overrides

VARIANTS = {
    "full": {},
    "disable_fusion": {"policy.disable_fusion": True},
    "disable_image": {"policy.disable_image": True},
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out-dir", default="runs/ablation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out_dir)
    rows = []
    for name, flags in VARIANTS.items():
        cfg = with_overrides(PRESETS["desk"], seed=args.seed, epochs=args.epochs, **flags)
        _, log = train(cfg, out / name)
        rows.append((name, log.initial_val_cost, log.records[-1].val_cost))
        print(f"{name:15s} untrained {rows[-1][1]:.4f} final {rows[-1][2]:.4f}")

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "initial_val_cost", "final_val_cost"])
        w.writerows(rows)
    full = rows[0][2]
    ok = all(full <= r[2] for r in rows[1:])
    print(f"full model best: {ok}")


if __name__ == "__main__":
    main()
