"""Median AUC over the adversarial weight grid, using the library API directly."""
import argparse
import logging

from adtransfer import presets
from adtransfer.evaluation import sweep, write_sweep_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", default="0.25,0.5,1,2")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="sweep_w_adloss.csv")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    grid = [float(v) for v in args.grid.split(",")]
    points = sweep(presets.synthetic_train_config(), "w_adloss", grid, presets.synthetic_factory,
                   repeats=args.repeats, jobs=args.jobs)
    write_sweep_csv(args.out, points)
    for p in points:
        print(f"w_adloss={p.value:<5g} median AUC {p.median_auc:.3f}  spread {p.spread:.3f}")


if __name__ == "__main__":
    main()
