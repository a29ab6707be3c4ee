"""Parameter counts and FLOP ratios for the full-size networks.

    python scripts/complexity_tables.py [--size 32x32]
"""
import argparse

from msconv.complexity import count_flops, count_params
from msconv.networks import ModelConfig, build_network, deepen_to_target

ROWS = [
    ("srresnet", "baseline"),
    ("srresnet", "ms"),
    ("srresnet", "ms2_no_lh"),
    ("srresnet", "ms2_no_hl"),
    ("srresnet", "ms2"),
    ("srresnet", "ms3"),
    ("srresnet", "ms3_large"),
    ("srresnet", "octave"),
    ("srresnet", "multigrid"),
    ("carn", "baseline"),
    ("carn", "ms3"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", default="32x32", help="LR input HxW")
    ap.add_argument("--deeper-target", type=float, default=0.678, help="FLOP ratio the deepened MS3 aims for")
    args = ap.parse_args()
    hw = tuple(int(t) for t in args.size.lower().split("x"))

    base = {}
    print(f"{'backbone':<9} {'variant':<10} {'blocks':>6} {'params':>10} {'GFLOPs':>9} {'p/std':>6} {'f/std':>6}")
    for backbone, variant in ROWS + [("srresnet", "ms3+")]:
        if variant == "ms3+":
            ref = build_network(ModelConfig())
            cfg = deepen_to_target(ModelConfig(variant="ms3"), int(args.deeper_target * count_flops(ref, hw)), hw)
        else:
            cfg = ModelConfig(backbone=backbone, variant=variant)
        net = build_network(cfg)
        p, f = count_params(net), count_flops(net, hw)
        base.setdefault(backbone, (p, f))
        bp, bf = base[backbone]
        print(f"{backbone:<9} {variant:<10} {cfg.num_blocks:>6} {p / 1e6:>9.4f}M {f / 1e9:>9.3f} {p / bp:>6.3f} {f / bf:>6.3f}")


if __name__ == "__main__":
    main()
