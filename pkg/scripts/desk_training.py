"""Desk-scale training of each variant on the toy set, against bicubic.

    python scripts/desk_training.py [--variants ms ms3] [--iters 2000]
"""
import argparse
import time

from msconv.desk import DESK_VARIANTS, desk_images, desk_train, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=list(DESK_VARIANTS))
    ap.add_argument("--iters", type=int)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    over = {"seed": args.seed}
    if args.iters:
        over.update(total_iters=args.iters, halve_every=max(1, args.iters // 4))
    tc = desk_train(**over)
    images = desk_images(tc.seed)
    print(f"# seed={tc.seed} iters={tc.total_iters} batch={tc.batch} patch={tc.hr_patch} lr={tc.lr}")
    print(f"{'variant':<9} {'loss0':>8} {'loss1':>8} {'psnr':>8} {'bicubic':>8} {'s/run':>6}")
    for v in args.variants:
        t = time.perf_counter()
        r = run_desk(v, tc, images=images)
        print(f"{v:<9} {r.smoothed_first:>8.4f} {r.smoothed_last:>8.4f} {r.psnr:>8.3f} {r.bicubic:>8.3f} {time.perf_counter() - t:>6.0f}", flush=True)


if __name__ == "__main__":
    main()
