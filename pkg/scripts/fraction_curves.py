"""Print fraction-of-attackable-samples curves from a finished run.

Reads ``<run>/label/fraction_attackable.csv`` (validation split) and prints
the fraction per model, and for the universal column, at a few budgets.
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--method", default="fgsm")
    ap.add_argument("--eps", type=float, nargs="+", default=[0.01, 0.02, 0.05, 0.1, 0.2])
    args = ap.parse_args()
    curves = defaultdict(dict)
    with open(args.run_dir / "label" / "fraction_attackable.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["method"] == args.method:
                curves[row["model"]][float(row["epsilon"])] = float(row["fraction"])
    print("model".ljust(10) + "".join(f"{e:>9.3f}" for e in args.eps))
    for model, curve in curves.items():
        # nearest grid budget not above the requested one
        vals = [curve[max((g for g in curve if g <= e + 1e-12), default=min(curve))] for e in args.eps]
        print(model.ljust(10) + "".join(f"{v:>9.3f}" for v in vals))


if __name__ == "__main__":
    main()
