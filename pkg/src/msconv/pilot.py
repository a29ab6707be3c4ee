"""Pilot functions built from dilated convolutions and nearest resampling.

Atoms compose left to right.  The central fact checked here is the
rearrangement identity

    conv_{d=1}(D2(x)) == D2(conv_{d=2}(x))

with top-left subsampling phase and zero padding ``d(k-1)/2``, which makes
``D2-W_{d=1}-U2`` and ``W_{d=2}-D2-U2`` the same function.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor
from .unified import ScaleFeatures

CASES = ("a", "b", "c", "d", "e")
PILOT_SPREAD_DB = 2.0  # declared tolerance between pilot cases at desk scale


@dataclass(frozen=True)
class Conv:
    param: Parameter
    dilation: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        d = self.dilation
        return T.conv2d(x, self.param, dilation=d, padding=d * (self.param.kernel - 1) // 2)

    def __str__(self):
        return f"W_{{d={self.dilation}}}"


@dataclass(frozen=True)
class D2:
    def __call__(self, x):
        return T.nearest_subsample2(x)

    def __str__(self):
        return "D2"


@dataclass(frozen=True)
class U2:
    def __call__(self, x):
        return T.nearest_upsample2(x)

    def __str__(self):
        return "U2"


@dataclass(frozen=True)
class Pool:
    stride: int

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError("pool stride must be 1 or 2")

    def __call__(self, x):
        return T.avg_pool2_s1(x) if self.stride == 1 else T.avg_pool2(x)

    def __str__(self):
        return f"Pool_{{s={self.stride}}}"


@dataclass(frozen=True)
class PipelineFn:
    atoms: tuple

    def __call__(self, x: Tensor) -> Tensor:
        for a in self.atoms:
            x = a(x)
        return x

    def __str__(self):
        return "-".join(str(a) for a in self.atoms)

    def then(self, other: "PipelineFn") -> "PipelineFn":
        return PipelineFn(self.atoms + other.atoms)

    def parameters(self) -> list[Parameter]:
        return [a.param for a in self.atoms if isinstance(a, Conv)]

    def flops(self, hw: tuple[int, int]) -> int:
        h, w = hw
        total = 0
        for a in self.atoms:
            if isinstance(a, Conv):
                co, ci, k, _ = a.param.shape
                total += T.conv_flops(co, ci, k, h, w)
            elif isinstance(a, D2) or (isinstance(a, Pool) and a.stride == 2):
                h, w = h // 2, w // 2
            elif isinstance(a, U2):
                h, w = h * 2, w * 2
        return total

    def scale_change(self) -> int:
        """Net factor-2 steps (positive = coarser)."""
        n = 0
        for a in self.atoms:
            n += isinstance(a, D2) or (isinstance(a, Pool) and a.stride == 2)
            n -= isinstance(a, U2)
        return n

    def depth(self) -> int:
        """Largest number of stacked halvings reached; inputs must divide 2**depth."""
        n = best = 0
        for a in self.atoms:
            n += isinstance(a, D2) or (isinstance(a, Pool) and a.stride == 2)
            n -= isinstance(a, U2)
            best = max(best, n)
        return best


@dataclass
class PilotLayer:
    """Sum of parallel pipeline branches, usable as a single-scale body unit."""

    case: str
    branches: list[PipelineFn]
    in_channels: tuple[int, ...]
    out_channels: tuple[int, ...]
    name: str = ""
    shared: bool = field(default=False, init=False)

    def __post_init__(self):
        if any(b.scale_change() for b in self.branches):
            raise ValueError("pilot branches must preserve spatial size")

    @property
    def multiple(self) -> int:
        return 2 ** max(b.depth() for b in self.branches)

    def parameters(self) -> list[Parameter]:
        return [p for b in self.branches for p in b.parameters()]

    def __call__(self, x: ScaleFeatures) -> ScaleFeatures:
        acc = None
        for b in self.branches:
            y = b(x[0])
            acc = y if acc is None else T.add(acc, y)
        return ScaleFeatures([acc], x.levels)

    def flop_rows(self, in_shapes):
        return [(0, sum(b.flops(in_shapes[0]) for b in self.branches), self.parameters())]

    def out_shapes(self, in_shapes):
        return [in_shapes[0]]

    def __str__(self):
        return " + ".join(str(b) for b in self.branches)


def build_pilot_case(case: str, c_in: int, c_out: int, rng: np.random.Generator | None = None, dtype=np.float64, kernel: int = 3) -> PilotLayer:
    """(a) W_{d=1}; (b) W_{d=2}; (c) W_{d=1} + W_{d=2} sharing one weight;
    (d) W_{d=2}-D2-U2; (e) Pool_{s=1}-W_{d=2}-D2-U2."""
    if case not in CASES:
        raise ValueError(f"unknown pilot case {case!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    p = Parameter.init(c_out, c_in, kernel, rng, dtype)
    if case == "a":
        br = [PipelineFn((Conv(p, 1),))]
    elif case == "b":
        br = [PipelineFn((Conv(p, 2),))]
    elif case == "c":
        br = [PipelineFn((Conv(p, 1),)), PipelineFn((Conv(p.alias(), 2),))]
    elif case == "d":
        br = [PipelineFn((Conv(p, 2), D2(), U2()))]
    else:
        br = [PipelineFn((Pool(1), Conv(p, 2), D2(), U2()))]
    return PilotLayer(case, br, (c_in,), (c_out,))


def case_factory(case: str, kernel: int = 3):
    """Body-layer hook for :func:`msconv.networks.build_network`."""

    def make(c_in, c_out, rng, dtype):
        return build_pilot_case(case, c_in, c_out, rng, dtype, kernel)

    return make


def check_rearrangement_identity(w: Parameter, x: Tensor, upsample: bool = False) -> float:
    """max |conv_{d=1}(D2 x) - D2(conv_{d=2} x)|, optionally with U2 appended
    to both sides."""
    k = w.kernel
    if k % 2 == 0:
        raise ValueError("identity needs an odd kernel")
    with T.no_grad():
        left = PipelineFn((D2(), Conv(w, 1)) + ((U2(),) if upsample else ()))(x)
        right = PipelineFn((Conv(w, 2), D2()) + ((U2(),) if upsample else ()))(x)
    return float(np.max(np.abs(left.data - right.data)))


# ---------------------------------------------------------------------------
# desk-scale pilot training

@dataclass
class PilotResult:
    case: str
    function: str
    params: int
    flops: int
    psnr: float
    bicubic: float
    improved: bool
    losses: list[float] = field(repr=False, default_factory=list)


def run_pilot_suite(
    train_cfg=None,
    model_overrides: dict | None = None,
    cases: Sequence[str] = CASES,
    train_images=None,
    eval_images=None,
    log=None,
) -> list[PilotResult]:
    """Train a small SRResNet once per case with every body convolution
    replaced by the case function."""
    from dataclasses import replace

    from .complexity import count_flops, count_params
    from .desk import desk_images, desk_model, desk_train
    from .networks import build_srresnet
    from .pipeline import bicubic_baseline, evaluate, train_loop

    tc = train_cfg or desk_train()
    cfg = desk_model("baseline", **(model_overrides or {}))
    if train_images is None or eval_images is None:
        tr, ev = desk_images(tc.seed)
        train_images = tr if train_images is None else train_images
        eval_images = ev if eval_images is None else eval_images
    bic = float(np.mean(bicubic_baseline(eval_images, cfg.upscale)))
    out = []
    for case in cases:
        net = build_srresnet(cfg, case_factory(case))
        layer = next(layer for name, layer in net.layers() if name.startswith("body."))
        rec, _ = train_loop(net, train_images, replace(tc), iters=tc.total_iters)
        psnr = float(np.mean(evaluate(net, eval_images)))
        res = PilotResult(case, str(layer), count_params(net), count_flops(net, (12, 12)), psnr, bic, rec.improved(), rec.losses)
        if log:
            log(f"case={case} function={res.function} params={res.params} psnr={psnr:.3f} bicubic={bic:.3f}")
        out.append(res)
    return out
