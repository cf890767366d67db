"""Refit the bundled default weights against the published rows.

    python scripts/calibrate_published.py            # print fit, write src/idguide/data/default_weights.json
    python scripts/calibrate_published.py --check    # exit 1 if the bundled file is stale
"""

import argparse
import json
import sys
from pathlib import Path

from idguide.selector import calibrate_weights, overall_score, published_calibration_rows
from idguide.stages import render_calibration

TARGET = Path(__file__).resolve().parents[1] / "src" / "idguide" / "data" / "default_weights.json"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()

    rows, labels = published_calibration_rows()
    report = calibrate_weights(rows, labels)
    print(render_calibration(report, rows))

    hold_rows, hold_labels = published_calibration_rows(holdout=True)
    if hold_rows:
        print("\nheld-out rows:")
        for lab, (mv, target) in zip(hold_labels, hold_rows):
            fit = overall_score(mv, report.weights)
            print(f"  {lab}: published {target:.4f}, predicted {fit:.4f} ({fit - target:+.5f})")

    doc = {
        "schema_version": 1,
        "weights": {k: round(v, 6) for k, v in report.weights.weights.items()},
        "calibration": {k: v for k, v in report.to_dict().items() if k != "weights"},
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.check:
        if not TARGET.exists() or TARGET.read_text() != text:
            print(f"{TARGET} is stale", file=sys.stderr)
            return 1
        return 0
    TARGET.write_text(text)
    print(f"\nwrote {TARGET}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
