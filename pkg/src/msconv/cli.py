"""Command-line entry point: ``msconv {analyze,verify,pilot,train,eval,infer}``.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

PARETO_FIELDS = ("variant", "depth", "flops", "params", "psnr")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _range(text: str) -> range:
    try:
        parts = [int(v) for v in text.split(":")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected START:STOP[:STEP], got {text!r}") from None
    if len(parts) not in (2, 3) or parts[0] < 0 or parts[1] < parts[0]:
        raise argparse.ArgumentTypeError(f"expected START:STOP[:STEP], got {text!r}")
    return range(parts[0], parts[1] + 1, parts[2] if len(parts) == 3 else 1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msconv", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="FLOPs and parameter report")
    a.add_argument("config")
    g = a.add_mutually_exclusive_group()
    g.add_argument("--input-size", type=_size, help="LR input size HxW")
    g.add_argument("--calibrate-to", type=float, metavar="FLOPS", help="choose the input size whose FLOPs match")
    a.add_argument("--multiple", type=int, default=8, help="calibrated sizes are multiples of this")
    a.add_argument("--sweep-depth", type=_range, metavar="A:B[:S]", help="emit (depth, FLOPs, params) rows")
    a.add_argument("--variants", nargs="+", default=["baseline", "ms", "ms2", "ms3"])
    a.add_argument("--pareto-out", help="delimiter-separated rows for plotting")
    a.add_argument("--records", action="store_true", help="machine-readable rows instead of a table")

    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("--suite", choices=("core", "equiv", "grad", "all"), default="all")
    v.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pilot", help="pilot cases: identities and desk-scale training")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", default="abcde")
    p.add_argument("--identities-only", action="store_true")

    t = sub.add_parser("train", help="train from a config")
    t.add_argument("config")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--resume", help="training checkpoint to continue from")

    e = sub.add_parser("eval", help="PSNR-Y of a checkpoint on HR images")
    e.add_argument("checkpoint")
    e.add_argument("image_dir")
    e.add_argument("--border", type=int)

    i = sub.add_parser("infer", help="super-resolve one image")
    i.add_argument("checkpoint")
    i.add_argument("input")
    i.add_argument("output")
    i.add_argument("--pad", action="store_true", help="reflect-pad to the required multiple and crop back")
    return ap


# ---------------------------------------------------------------------------

def emit_pareto(rows: list[dict], path=None, out=sys.stdout) -> list[dict]:
    """Sort rows by (variant, FLOPs) and write them tab-separated."""
    order = {}
    for r in rows:
        order.setdefault(r["variant"], len(order))
    rows = sorted(rows, key=lambda r: (order[r["variant"]], r["flops"], r["depth"]))
    with open(path, "w", newline="") if path else contextlib.nullcontext(out) as f:
        w = csv.DictWriter(f, PARETO_FIELDS, delimiter="\t", lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in PARETO_FIELDS})
    return rows


def read_pareto(path) -> list[dict]:
    with open(path, newline="") as f:
        out = []
        for r in csv.DictReader(f, delimiter="\t"):
            out.append(
                {
                    "variant": r["variant"],
                    "depth": int(r["depth"]),
                    "flops": int(r["flops"]),
                    "params": int(r["params"]),
                    "psnr": float(r["psnr"]) if r["psnr"] else None,
                }
            )
        return out


def _cmd_analyze(args, log) -> int:
    from .complexity import calibrate_input_size, complexity_report, count_flops, count_params
    from .config import load_config
    from .networks import build_network

    rc = load_config(args.config)
    net = build_network(rc.model)
    log(f"# seed={rc.model.seed} backbone={rc.model.backbone} variant={rc.model.variant} blocks={rc.model.num_blocks}")
    if args.calibrate_to is not None:
        hw = calibrate_input_size(net, args.calibrate_to, multiple=args.multiple)
        log(f"# calibrated input {hw[0]}x{hw[1]} for target {args.calibrate_to:.6g}")
    else:
        hw = args.input_size or (32, 32)
    rep = complexity_report(net, hw)
    log(rep.to_records() if args.records else rep.to_text())
    log(f"# total flops {rep.flops / 1e9:.4f}G params {rep.params / 1e6:.4f}M")
    if args.sweep_depth is not None:
        rows = []
        for variant in args.variants:
            for depth in args.sweep_depth:
                n = build_network(replace(rc.model, variant=variant, num_blocks=depth, branches=max(2, rc.model.branches)))
                rows.append({"variant": variant, "depth": depth, "flops": count_flops(n, hw), "params": count_params(n), "psnr": None})
        emit_pareto(rows, args.pareto_out)
        if args.pareto_out:
            log(f"# wrote {len(rows)} rows to {args.pareto_out}")
    return 0


def _cmd_verify(args, log) -> int:
    from .verify import run_suite

    log(f"# seed={args.seed} suite={args.suite}")
    checks = run_suite(args.suite, args.seed, log)
    failed = sum(not c.passed for c in checks)
    log(f"# {len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


def _cmd_pilot(args, log) -> int:
    from .pilot import CASES, PILOT_SPREAD_DB, run_pilot_suite
    from .desk import desk_train
    from .verify import check_rearrangement

    log(f"# seed={args.seed}")
    c = check_rearrangement(np.random.default_rng(args.seed))
    log(c.line())
    if args.identities_only:
        return 0 if c.passed else 1
    cases = [x for x in args.cases if x in CASES]
    tc = desk_train(total_iters=args.iters, halve_every=max(1, args.iters // 4), seed=args.seed)
    res = run_pilot_suite(tc, {"seed": args.seed}, cases)
    log(f"{'case':<5} {'function':<34} {'params':>8} {'psnr':>8} {'bicubic':>8}")
    for r in res:
        log(f"{r.case:<5} {r.function:<34} {r.params:>8} {r.psnr:>8.3f} {r.bicubic:>8.3f}")
    spread = max(r.psnr for r in res) - min(r.psnr for r in res)
    log(f"# spread {spread:.3f} dB (declared tolerance {PILOT_SPREAD_DB} dB)")
    return 0 if c.passed else 1


def _cmd_train(args, log) -> int:
    from .config import load_config
    from .networks import build_network
    from .pipeline import DatasetSpec, load_dataset, load_training_state, save_training_state, train_loop

    rc = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        net, tc, state, start = load_training_state(args.resume)
    else:
        model = rc.model if args.seed is None else replace(rc.model, seed=args.seed)
        net, tc, state, start = build_network(model), rc.train, None, 0
        if args.seed is not None:
            tc = replace(tc, seed=args.seed)
    iters = args.iters if args.iters is not None else tc.total_iters - start
    data = rc.data or DatasetSpec(synthetic=16, synthetic_size=96, upscale=net.cfg.upscale)
    if data.upscale != net.cfg.upscale:
        raise ValueError(f"data upscale {data.upscale} differs from model upscale {net.cfg.upscale}")
    images = load_dataset(data, tc.seed)
    eval_images = load_dataset(replace(data, split="eval"), tc.seed) if data.synthetic else None
    log(f"# seed model={net.cfg.seed} data={tc.seed} iters={iters} start={start}")
    rec, state = train_loop(net, images, tc, iters=iters, state=state, start_iter=start, eval_images=eval_images, checkpoint_dir=out, log=log)
    (out / "record.txt").write_text("\n".join(rec.to_lines(tc)) + "\n")
    save_training_state(out / "final.msck", net, tc, state, start + iters)
    log(f"# wrote {out / 'final.msck'}")
    return 0


def _cmd_eval(args, log) -> int:
    from .imageio import read_image
    from .networks import load_checkpoint
    from .pipeline import bicubic_baseline, evaluate

    net, _, _ = load_checkpoint(args.checkpoint)
    r = net.cfg.upscale
    paths = sorted(p for p in Path(args.image_dir).iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm/.pgm images in {args.image_dir}")
    imgs = [read_image(p) for p in paths]
    imgs = [im[:, : im.shape[1] // r * r, : im.shape[2] // r * r] for im in imgs]
    scores = evaluate(net, imgs, args.border)
    bic = bicubic_baseline(imgs, r, args.border)
    log(f"# seed={net.cfg.seed} border={r if args.border is None else args.border}")
    for p, s, b in zip(paths, scores, bic):
        log(f"{p.name}\tpsnr_y={s:.4f}\tbicubic={b:.4f}")
    log(f"mean\tpsnr_y={np.mean(scores):.4f}\tbicubic={np.mean(bic):.4f}")
    return 0


def _cmd_infer(args, log) -> int:
    from . import tensor as T
    from .imageio import read_image, write_image
    from .networks import forward_sr, infer_padded, load_checkpoint
    from .tensor import Tensor

    net, _, _ = load_checkpoint(args.checkpoint)
    lr = read_image(args.input)
    if args.pad:
        sr = infer_padded(net, lr)
    else:
        with T.no_grad():
            sr = forward_sr(net, Tensor(lr[None].astype(net.cfg.np_dtype))).data[0]
    write_image(args.output, sr)
    log(f"# seed={net.cfg.seed} wrote {args.output} {sr.shape[2]}x{sr.shape[1]}")
    return 0


COMMANDS = {
    "analyze": _cmd_analyze,
    "verify": _cmd_verify,
    "pilot": _cmd_pilot,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
}


def _thread_limit():
    n = int(os.environ.get("MSCONV_THREADS", "0") or 0)
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def log(msg: str):
        print(msg, flush=True)

    try:
        with _thread_limit():
            return COMMANDS[args.command](args, log)
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
