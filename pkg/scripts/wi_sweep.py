"""Identity-guidance weight sweep on the two-identity testbed.

    python scripts/wi_sweep.py                       # w_i in 0, 0.5, 1, 2 at w_c=1, 1000 seeds
    python scripts/wi_sweep.py --wi 0,1,2,4 --temperature 2 --decay cosine-to-zero
"""

import argparse

from idguide.guidance import AnalyticDenoiser, DecaySchedule, DegradationSpec, GuidanceConfig, guided_sample_batch
from idguide.testbed import ConditionSet, make_schedule, mode_hit_rate, symmetric_identity_world


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--wi", default="0,0.5,1,2")
    ap.add_argument("--wc", type=float, default=1.0)
    ap.add_argument("--seeds", type=int, default=1000)
    ap.add_argument("--temperature", type=float, default=1.5, help="weak-model temperature")
    ap.add_argument("--decay", default="constant")
    ap.add_argument("--separation", type=float, default=0.5, help="identity mode separation")
    ap.add_argument("--steps", type=int, default=50)
    args = ap.parse_args()

    world = symmetric_identity_world(separation=args.separation)
    sched = make_schedule(args.steps)
    den = AnalyticDenoiser(world, sched)
    cond = ConditionSet("run", "A")
    seeds = range(args.seeds)
    print(f"{'w_i':>6} | identity hit | joint hit")
    for w_i in (float(v) for v in args.wi.split(",")):
        cfg = GuidanceConfig(args.wc, w_i, DecaySchedule(args.decay), DegradationSpec(temperature=args.temperature))
        finals = guided_sample_batch(den, cond, cfg, sched, seeds, world.dim).final
        ident = mode_hit_rate(finals, world, ConditionSet(identity="A"))
        joint = mode_hit_rate(finals, world, cond)
        print(f"{w_i:>6g} | {ident:12.3f} | {joint:9.3f}")


if __name__ == "__main__":
    main()
