"""Print per-model Spearman correlations of minimum perturbations between attacks."""

import argparse
import json
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    args = ap.parse_args()
    report = json.loads((args.run_dir / "report" / "report.json").read_text())
    for row in report["correlation"]:
        print(f"{row['model']:<10} {row['pair']:<10} {row['spearman']:.3f}")


if __name__ == "__main__":
    main()
