"""Print post-training fooling rates for each budget and ranking."""

import argparse
import json
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    args = ap.parse_args()
    act = json.loads((args.run_dir / "report" / "report.json").read_text())["active_adv"]
    if not act["enabled"]:
        print("active training disabled in this run")
        return
    print(f"before training: {act['fooling_rate_before']:.4f}")
    for r in act["runs"]:
        print(f"budget {r['budget']:<5} {r['ranking']:<12} {r['fooling_rate']:.4f}")


if __name__ == "__main__":
    main()
