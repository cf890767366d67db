"""Write a synthetic manifest, references and run config, then optionally run every stage.

    python scripts/make_synthetic_run.py demo --samples 50 --seed 0 --run
"""

import argparse
import os

from idguide.cli import main as cli
from idguide.synthetic import make_synthetic_run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root")
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--run", action="store_true", help="run enhance, sample, score, select and report into <root>/run")
    args = ap.parse_args()

    cfg = make_synthetic_run(args.root, args.samples, args.seed)
    print(f"config: {cfg}")
    if not args.run:
        return 0
    os.environ.setdefault("SOURCE_DATE_EPOCH", "0")
    out = os.path.join(args.root, "run")
    for stage in ("enhance", "sample", "score", "select", "report"):
        code = cli([stage, "--config", str(cfg), "-o", out, "--force"])
        if code:
            return code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
