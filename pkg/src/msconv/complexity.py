"""Multiply-add and parameter accounting for networks of multi-scale units.

One FLOP is one multiply-add of a convolution.  Bias adds, activations,
pooling, resampling and pixel shuffle count zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .networks import Network, trace_shapes

HEADER = "flops = conv multiply-adds per sample (bias, activation, resampling excluded); params include biases, shared weights once"


@dataclass(frozen=True)
class Row:
    name: str
    scale: int
    flops: int
    params: int


@dataclass
class ComplexityReport:
    input_size: tuple[int, int]
    rows: list[Row] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    def to_text(self) -> str:
        w = max([len(r.name) for r in self.rows] + [5])
        lines = [f"# {HEADER}", f"# input {self.input_size[0]}x{self.input_size[1]}"]
        lines.append(f"{'layer':<{w}}  scale  {'flops':>14}  {'params':>10}")
        for r in self.rows:
            lines.append(f"{r.name:<{w}}  {r.scale:>5}  {r.flops:>14,}  {r.params:>10,}")
        lines.append(f"{'total':<{w}}  {'':>5}  {self.flops:>14,}  {self.params:>10,}")
        return "\n".join(lines)

    def to_records(self) -> str:
        """One ``key=value`` line per layer with keys name, scale, flops, params."""
        out = [f"name={r.name} scale={r.scale} flops={r.flops} params={r.params}" for r in self.rows]
        out.append(f"name=total scale=-1 flops={self.flops} params={self.params}")
        return "\n".join(out)


def complexity_report(net: Network, lr_size: tuple[int, int]) -> ComplexityReport:
    seen: set[int] = set()
    rows = []
    for node, in_hw in trace_shapes(net, lr_size):
        for scale, fl, params in node.layer.flop_rows(in_hw):
            n = 0
            for p in params:
                sid = p.base.share_id
                if sid not in seen:
                    seen.add(sid)
                    n += p.base.size()
            rows.append(Row(node.name, scale, fl, n))
    return ComplexityReport(tuple(lr_size), rows)


def count_params(net: Network) -> int:
    return sum(p.size() for p in net.parameters())


def count_flops(net: Network, lr_size: tuple[int, int]) -> int:
    return complexity_report(net, lr_size).flops


def flops_per_pixel(net: Network) -> float:
    """FLOPs per LR input pixel (the slope of the affine pixel-count law)."""
    m = net.multiple
    a = count_flops(net, (m, m))
    b = count_flops(net, (2 * m, 2 * m))
    return (b - a) / (3 * m * m)


def calibrate_input_size(net: Network, target_flops: float, aspect: float = 1.0, multiple: int | None = None) -> tuple[int, int]:
    """LR size ``(H, W)`` whose FLOPs best match the target.

    FLOPs are affine in the pixel count ``P``; solve for ``P`` and search the
    sizes near ``H = sqrt(P / aspect)`` that are multiples of ``multiple``
    (default: the network's own divisibility requirement).  Pass a larger
    multiple to get a size that is also valid for deeper scale pyramids.
    """
    if target_flops <= 0:
        raise ValueError("target must be positive")
    m = multiple or net.multiple
    if m % net.multiple:
        raise ValueError(f"multiple must be divisible by {net.multiple}")
    p1 = m * m
    f1 = count_flops(net, (m, m))
    slope = flops_per_pixel(net)
    pixels = p1 + (target_flops - f1) / slope
    if pixels < p1 * 0.5:
        raise ValueError(f"target {target_flops:g} is below the smallest valid input")
    h0 = math.sqrt(pixels / aspect)
    cands = []
    for h in range(max(m, int(h0 / m) * m - 4 * m), int(h0 / m) * m + 5 * m, m):
        w_ideal = pixels / h
        for w in (max(m, int(w_ideal / m) * m), int(w_ideal / m) * m + m):
            err = abs(f1 + slope * (h * w - p1) - target_flops)
            cands.append((err, abs(math.log(w / (h * aspect))), (h, w)))
    # closest FLOPs first; among near-ties prefer the requested aspect
    best_err = min(c[0] for c in cands)
    near = [c for c in cands if c[0] <= best_err + 0.005 * target_flops]
    return min(near, key=lambda c: (c[1], c[0]))[2]
