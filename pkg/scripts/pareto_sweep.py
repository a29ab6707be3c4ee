"""Depth sweep of (FLOPs, params) per variant, written as a TSV for plotting.

With --train, each point is also trained at desk scale and its eval PSNR
filled in (slow: a couple of minutes per point).

    python scripts/pareto_sweep.py --depths 2 4 8 --out pareto.tsv
"""
import argparse

from msconv.cli import emit_pareto
from msconv.complexity import count_flops, count_params
from msconv.desk import desk_images, desk_model, desk_train, run_desk
from msconv.networks import build_network


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=["baseline", "ms", "ms2", "ms3"])
    ap.add_argument("--depths", nargs="+", type=int, default=[2, 4, 8])
    ap.add_argument("--size", type=int, default=24, help="square LR size for FLOPs")
    ap.add_argument("--train", action="store_true")
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--out")
    args = ap.parse_args()

    images = desk_images() if args.train else None
    rows = []
    for v in args.variants:
        for d in args.depths:
            net = build_network(desk_model(v, num_blocks=d))
            row = {"variant": v, "depth": d, "flops": count_flops(net, (args.size, args.size)), "params": count_params(net), "psnr": None}
            if args.train:
                tc = desk_train(total_iters=args.iters, halve_every=max(1, args.iters // 4))
                row["psnr"] = round(run_desk(v, tc, {"num_blocks": d}, images).psnr, 4)
            rows.append(row)
    emit_pareto(rows, args.out)


if __name__ == "__main__":
    main()
