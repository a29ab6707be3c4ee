"""Train the five pilot cases at desk scale and report PSNR per case.

    python scripts/pilot_suite.py [--cases abc] [--iters 2000]
"""
import argparse

from msconv.desk import desk_train
from msconv.pilot import PILOT_SPREAD_DB, run_pilot_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cases", default="abcde")
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    tc = desk_train(total_iters=args.iters, halve_every=max(1, args.iters // 4), seed=args.seed)
    res = run_pilot_suite(tc, {"seed": args.seed}, list(args.cases), log=print)
    spread = max(r.psnr for r in res) - min(r.psnr for r in res)
    print(f"# spread {spread:.3f} dB (declared tolerance {PILOT_SPREAD_DB} dB)")


if __name__ == "__main__":
    main()
