"""Print best F1 per setting, detector and polarity for one regime."""

import argparse
import json
from pathlib import Path


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--regime", default="matched", choices=["matched", "unmatched"])
    args = ap.parse_args()
    report = json.loads((args.run_dir / "report" / "report.json").read_text())
    print(f"{'polarity':<11}{'setting':<8}{'n_pos':>7}{'prev':>8}{'conf-s':>8}{'conf-u':>8}{'deep':>8}")
    cells = {}
    for r in report["detection"]:
        if r["regime"] == args.regime:
            cells.setdefault((r["polarity"], r["setting"]), {})[r["detector"]] = r
    for (pol, setting), dets in cells.items():
        any_row = next(iter(dets.values()))
        if any_row["status"] != "ok":
            print(f"{pol:<11}{setting:<8}{any_row['n_positive']:>7}   skipped")
            continue
        f1 = "".join(f"{dets[d]['best_f1']:>8.3f}" for d in ("conf-s", "conf-u", "deep"))
        print(f"{pol:<11}{setting:<8}{any_row['n_positive']:>7}{any_row['prevalence_f1']:>8.3f}{f1}")


if __name__ == "__main__":
    main()
