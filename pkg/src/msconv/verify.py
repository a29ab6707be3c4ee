"""Invariant suites behind ``msconv verify``.

Each check returns a :class:`Check`; a suite passes when all checks do.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import oracles as O
from . import tensor as T
from .tensor import Parameter, Tensor
from .unified import (
    VARIANTS,
    ZERO,
    MSConvUnit,
    ScaleFeatures,
    TransformSpec,
    build_multibranch_ms3,
    build_variant,
    concat_groups,
    split_channels,
    unfold_standard,
)

SUITES = ("core", "equiv", "grad", "all")
GRAD_TOL = 1e-4
EXACT_TOL = 1e-12


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}"


def _rand(rng, shape, grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


def random_features(unit: MSConvUnit, rng, n=2, hw=8) -> ScaleFeatures:
    levels = unit.spec.in_levels
    return ScaleFeatures([_rand(rng, (n, c, hw >> lv, hw >> lv)) for c, lv in zip(unit.in_channels, levels)], levels)


def unit_cases(rng) -> list[tuple[str, MSConvUnit]]:
    """One small unit per variant, plus multi-branch MS3 for 1 to 4 scales."""
    out = [("standard", build_variant("standard", 1, (3,), (4,), rng=rng))]
    for name in VARIANTS:
        if name in ("standard", "multigrid"):
            continue
        out.append((name, build_variant(name, 2, (3, 3), (3, 2) if name != "unet" else None, rng=rng)))
    out.append(("multigrid", build_variant("multigrid", 3, (2, 2, 2), rng=rng)))
    for s in range(1, 5):
        out.append((f"ms3x{s}", build_multibranch_ms3(s, (2,) * s, rng=rng)))
    return out


# ---------------------------------------------------------------------------
# core

def check_conv_oracle(rng) -> Check:
    worst = 0.0
    for k, s, d, p in itertools.product((1, 3), (1, 2), (1, 2), (0, 1, 2)):
        x = rng.standard_normal((1, 2, 7, 6))
        w = Parameter(rng.standard_normal((3, 2, k, k)), rng.standard_normal(3))
        if T.conv_output_size(6, k, s, d, p) < 1:
            continue
        got = T.conv2d(Tensor(x), w, s, d, p).data
        worst = max(worst, float(np.max(np.abs(got - O.direct_conv2d(x, w.weight, w.bias, s, d, p)))))
    return Check("conv2d vs nested-loop oracle", worst <= EXACT_TOL, f"max dev {worst:.2e}")


def check_resampling(rng) -> Check:
    x = rng.standard_normal((2, 3, 6, 4))
    mx, _ = O.max_pool_ref(x)
    devs = [
        np.max(np.abs(T.avg_pool2(Tensor(x)).data - O.avg_pool_ref(x))),
        np.max(np.abs(T.max_pool2(Tensor(x)).data - mx)),
        np.max(np.abs(T.nearest_upsample2(Tensor(x)).data - O.upsample_ref(x))),
        np.max(np.abs(T.nearest_subsample2(Tensor(x)).data - x[:, :, ::2, ::2])),
    ]
    y = rng.standard_normal((1, 8, 3, 3))
    devs.append(np.max(np.abs(T.pixel_shuffle(Tensor(y), 2).data - O.pixel_shuffle_ref(y, 2))))
    worst = float(max(devs))
    return Check("resampling and pixel shuffle vs oracles", worst <= EXACT_TOL, f"max dev {worst:.2e}")


def check_eq1_summation(rng) -> Check:
    worst = 0.0
    for name, unit in unit_cases(rng):
        x = random_features(unit, rng)
        y = unit(x)
        for i, row in enumerate(unit.spec.entries):
            parts = [e(x[j]).data for j, e in enumerate(row) if e.kind != ZERO]
            ref = np.sum(parts, axis=0) if parts else np.zeros_like(y[i].data)
            worst = max(worst, float(np.max(np.abs(y[i].data - ref))))
    return Check("unit output is the sum of its entries", worst <= EXACT_TOL, f"max dev {worst:.2e}")


def check_sharing(rng) -> Check:
    unit = build_variant("ms3", 2, (4, 4), rng=rng)
    diag = [unit.spec.entries[i][i].param for i in range(2)]
    distinct = len({p.share_id for p in diag})
    diag[0].weight[0, 0, 0, 0] += 1.0
    visible = diag[1].weight[0, 0, 0, 0] == diag[0].weight[0, 0, 0, 0]
    from .pipeline import AdamState, adam_step

    x = random_features(unit, rng)
    tape = T.Tape()
    with T.using_tape(tape):
        loss = T.sum_all(T.add(T.sum_all(unit(x)[0]), T.sum_all(unit(x)[1])))
        T.backward(loss, tape)
    adam_step(unit.parameters(), AdamState(), 1e-2)
    same = np.array_equal(diag[0].weight, diag[1].weight)
    ok = distinct == 1 and visible and same
    return Check("MS3 diagonal sharing", ok, f"distinct={distinct} alias_visible={visible} identical_after_step={same}")


def check_ratio_invariance(rng) -> Check:
    from .complexity import count_flops
    from .networks import ModelConfig, build_network

    base = build_network(ModelConfig(num_blocks=2, width=16))
    ms = build_network(ModelConfig(num_blocks=2, width=16, variant="ms3"))
    r = [count_flops(ms, hw) / count_flops(base, hw) for hw in ((8, 8), (24, 40), (64, 16))]
    dev = max(abs(a - r[0]) / r[0] for a in r)
    return Check("FLOPs ratio independent of input size", dev <= 1e-9, f"ratios {['%.6f' % a for a in r]}")


def check_flop_counter(rng) -> Check:
    counter = [0]
    x = rng.standard_normal((1, 3, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    O.direct_conv2d(x, w, np.zeros(4), padding=1, counter=counter)
    expect = T.conv_flops(4, 3, 3, 5, 6)
    return Check("conv FLOPs equal oracle multiplication count", counter[0] == expect, f"{counter[0]} vs {expect}")


# ---------------------------------------------------------------------------
# equivalences

def check_unfold(rng, cases: int = 24) -> Check:
    worst = 0.0
    for _ in range(cases):
        ci, co = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        k = int(rng.choice([1, 3, 5]))
        w = Parameter(rng.standard_normal((co, ci, k, k)), rng.standard_normal(co))
        split_in = _random_partition(rng, ci)
        split_out = _random_partition(rng, co)
        x = rng.standard_normal((2, ci, int(rng.integers(3, 9)), int(rng.integers(3, 9))))
        unit = unfold_standard(w, split_in, split_out)
        got = concat_groups(unit(split_channels(Tensor(x), split_in))).data
        ref = T.conv2d(Tensor(x), w, padding=k // 2).data
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return Check(f"unfolded convolution equals standard ({cases} cases)", worst <= EXACT_TOL, f"max dev {worst:.2e}")


def _random_partition(rng, n: int) -> tuple[int, ...]:
    cuts = sorted(rng.choice(np.arange(1, n), size=int(rng.integers(0, n)), replace=False)) if n > 1 else []
    b = [0, *cuts, n]
    return tuple(int(b[i + 1] - b[i]) for i in range(len(b) - 1))


def check_rearrangement(rng) -> Check:
    from .pilot import check_rearrangement_identity

    worst = 0.0
    for (h, w), k, up in itertools.product(((8, 8), (16, 16), (8, 12), (6, 10)), (1, 3, 5), (False, True)):
        p = Parameter(rng.standard_normal((3, 2, k, k)), rng.standard_normal(3))
        worst = max(worst, check_rearrangement_identity(p, Tensor(rng.standard_normal((2, 2, h, w))), upsample=up))
    return Check("D2-W(d=1)-U2 == W(d=2)-D2-U2", worst <= EXACT_TOL, f"max dev {worst:.2e}")


def check_network_unfold(rng) -> Check:
    from .networks import ModelConfig, build_network, forward_sr, unfold_network

    worst = 0.0
    for backbone in ("srresnet", "carn"):
        cfg = ModelConfig(backbone=backbone, num_blocks=1, width=8, head_kernel=3, upscale=2, dtype="float64")
        net = build_network(cfg)
        x = Tensor(rng.random((1, 3, 6, 6)))
        with T.no_grad():
            a = forward_sr(net, x).data
            b = forward_sr(unfold_network(net), x).data
        worst = max(worst, float(np.max(np.abs(a - b))))
    return Check("unfolded baseline network matches baseline", worst <= 1e-10, f"max dev {worst:.2e}")


# ---------------------------------------------------------------------------
# gradients

def op_gradchecks(rng) -> list[tuple[str, float]]:
    out = []

    def run(name, fn, tensors, params=()):
        out.append((name, O.gradcheck(fn, tensors, params)))

    x = _rand(rng, (2, 3, 6, 4))
    for k, s, d, p in ((3, 1, 1, 1), (3, 2, 1, 0), (3, 1, 2, 2), (1, 1, 1, 0), (5, 1, 1, 2)):
        w = Parameter.init(2, 3, k, rng)
        w.bias[:] = rng.standard_normal(2)
        run(f"conv2d k={k} s={s} d={d} p={p}", lambda w=w, s=s, d=d, p=p: T.conv2d(x, w, s, d, p), [x], [w])
    for name, f in (
        ("avg_pool2", T.avg_pool2),
        ("max_pool2", T.max_pool2),
        ("avg_pool2_s1", T.avg_pool2_s1),
        ("nearest_upsample2", T.nearest_upsample2),
        ("nearest_subsample2", T.nearest_subsample2),
        ("relu", T.relu),
        ("abs", T.abs_),
        ("mean", T.mean),
        ("sum", T.sum_all),
        ("scale", lambda t: T.scale(t, -1.7)),
        ("take_channels", lambda t: T.take_channels(t, [2, 0])),
    ):
        run(name, lambda f=f: f(x), [x])
    y = _rand(rng, (2, 3, 6, 4))
    run("add", lambda: T.add(x, y), [x, y])
    run("sub", lambda: T.sub(x, y), [x, y])
    run("concat", lambda: T.concat([x, y]), [x, y])
    z = _rand(rng, (1, 8, 3, 2))
    run("pixel_shuffle", lambda: T.pixel_shuffle(z, 2), [z])
    return out


def unit_gradchecks(rng) -> list[tuple[str, float]]:
    out = []
    for name, unit in unit_cases(rng):
        for p in T.unique_parameters(unit.parameters()):
            p.bias[:] = rng.standard_normal(p.bias.shape) * 0.1
        x = random_features(unit, rng, n=1, hw=8)
        for g in x:
            g.requires_grad = True

        def fn(unit=unit, x=x):
            return T.concat([_upsample_to(g, x[0].shape[2]) for g in unit(x)])

        out.append((f"unit {name}", O.gradcheck(fn, list(x), unit.parameters())))
    return out


def _upsample_to(g: Tensor, h: int) -> Tensor:
    """Bring a coarse group to height ``h`` by nearest upsampling so groups concat."""
    while g.shape[2] < h:
        g = T.nearest_upsample2(g)
    return g


def shared_site_gradient(rng, h: float = 1e-5) -> float:
    """Relative error between the shared diagonal's analytic gradient and the
    sum of per-site finite differences (each site perturbed alone)."""
    unit = build_variant("ms3", 2, (3, 3), rng=rng)
    for p in T.unique_parameters(unit.parameters()):
        p.bias[:] = rng.standard_normal(p.bias.shape) * 0.1
    x = random_features(unit, rng, n=1, hw=6)
    proj = [rng.standard_normal(g.shape) for g in unit(x)]

    def objective(u):
        with T.no_grad():
            return sum(float(np.sum(g.data * r)) for g, r in zip(u(x), proj))

    tape = T.Tape()
    shared = unit.spec.entries[0][0].param.base
    shared.zero_grad()
    with T.using_tape(tape):
        y = unit(x)
        loss = T.add(T.sum_all(T.mul_const(y[0], proj[0])), T.sum_all(T.mul_const(y[1], proj[1])))
        T.backward(loss, tape)
    analytic = np.concatenate([shared.gweight.ravel(), shared.gbias.ravel()])

    # untie: give every diagonal site its own copy
    sites = []
    rows = [list(r) for r in unit.spec.entries]
    for i in range(2):
        e = rows[i][i]
        own = Parameter(e.param.weight.copy(), e.param.bias.copy())
        rows[i][i] = replace(e, param=own)
        sites.append(own)
    untied = MSConvUnit(TransformSpec(rows, unit.in_channels, unit.out_channels))
    numeric = np.zeros_like(analytic)
    for own in sites:
        for pos, arr in enumerate((own.weight, own.bias)):
            flat = arr.reshape(-1)
            off = 0 if pos == 0 else shared.weight.size
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = objective(untied)
                flat[i] = old - h
                fm = objective(untied)
                flat[i] = old
                numeric[off + i] += (fp - fm) / (2 * h)
    return O.rel_error(analytic, numeric)


# ---------------------------------------------------------------------------

def run_suite(name: str, seed: int = 0, log: Callable[[str], None] | None = None) -> list[Check]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    rng = np.random.default_rng(seed)
    checks: list[Check] = []

    def add(c: Check):
        checks.append(c)
        if log:
            log(c.line())

    if name in ("core", "all"):
        for f in (check_conv_oracle, check_resampling, check_eq1_summation, check_sharing, check_ratio_invariance, check_flop_counter):
            add(f(rng))
    if name in ("equiv", "all"):
        for f in (check_unfold, check_rearrangement, check_network_unfold):
            add(f(rng))
    if name in ("grad", "all"):
        for label, err in op_gradchecks(rng) + unit_gradchecks(rng):
            add(Check(f"gradient {label}", err < GRAD_TOL, f"max rel err {err:.2e}"))
        err = shared_site_gradient(rng)
        add(Check("shared weight gradient equals sum of per-site finite differences", err < GRAD_TOL, f"max rel err {err:.2e}"))
    return checks
