"""Acceptance criteria, one pass/fail line each.

Lines are collected into ``ACCEPTANCE`` and printed in the terminal summary
(see conftest.py). Run directly with ``python tests/test_acceptance.py`` for
the same lines without pytest.
"""
from __future__ import annotations

import numpy as np
import pytest

from msconv import verify as V
from msconv.complexity import count_flops, count_params
from msconv.desk import DESK_VARIANTS, desk_images, desk_train, run_desk
from msconv.networks import ModelConfig, build_network, deepen_to_target
from msconv.pilot import CASES, run_pilot_suite
from msconv.tensor import unique_parameters
from msconv.unified import MSConvUnit, build_variant

ACCEPTANCE: list[str] = []


def record(crit: str, name: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  [{crit}] {name}  {detail}".rstrip())
    return passed


def params_of(variant, backbone="srresnet", **kw):
    return count_params(build_network(ModelConfig(backbone=backbone, variant=variant, **kw)))


# ---------------------------------------------------------------------------
# 1. parameter counts

PARAM_TARGETS = [
    ("SRResNet baseline", "srresnet", "baseline", 1.59e6, 0.05),
    ("SRResNet MS", "srresnet", "ms", 0.82e6, 0.05),
    ("SRResNet MS2 without low-to-high", "srresnet", "ms2_no_lh", 1.21e6, 0.05),
    ("SRResNet MS2 without high-to-low", "srresnet", "ms2_no_hl", 1.21e6, 0.05),
    ("SRResNet MS2", "srresnet", "ms2", 1.59e6, 0.05),
    ("SRResNet MS3", "srresnet", "ms3", 0.52e6, 0.05),
    ("CARN baseline", "carn", "baseline", 1.15e6, 0.10),
    ("CARN MS3", "carn", "ms3", 0.45e6, 0.05),
]


@pytest.mark.parametrize("label,backbone,variant,target,tol", PARAM_TARGETS, ids=[t[0] for t in PARAM_TARGETS])
def test_param_counts(label, backbone, variant, target, tol):
    p = params_of(variant, backbone)
    rel = p / target - 1
    assert record("1", f"params {label}", abs(rel) <= tol, f"{p / 1e6:.4f}M vs {target / 1e6:.2f}M ({rel:+.1%}, tol {tol:.0%})")


# ---------------------------------------------------------------------------
# 2. FLOPs ratios

SIZES = [(16, 16), (24, 40), (48, 48)]
RATIO_TARGETS = [("MS", "ms", 0.391), ("MS2", "ms2", 0.486), ("MS3", "ms3", 0.401)]


def flop_ratios(variant, num_blocks=16):
    base = build_network(ModelConfig())
    net = build_network(ModelConfig(variant=variant, num_blocks=num_blocks))
    return [count_flops(net, hw) / count_flops(base, hw) for hw in SIZES]


@pytest.mark.parametrize("label,variant,target", RATIO_TARGETS, ids=[t[0] for t in RATIO_TARGETS])
def test_flop_ratios(label, variant, target):
    r = flop_ratios(variant)
    worst = max(abs(x - target) for x in r)
    assert record("2", f"FLOPs ratio {label}/std", worst <= 0.02, f"{r[0]:.4f} vs {target} at {len(SIZES)} sizes (max dev {worst:.4f})")


@pytest.fixture(scope="module")
def deeper_ms3():
    base = build_network(ModelConfig())
    ref = (32, 32)
    cfg = deepen_to_target(ModelConfig(variant="ms3"), int(0.678 * count_flops(base, ref)), ref)
    return cfg, build_network(cfg), base


def test_deeper_ms3_flops(deeper_ms3):
    cfg, net, base = deeper_ms3
    r = [count_flops(net, hw) / count_flops(base, hw) for hw in SIZES]
    worst = max(abs(x - 0.678) for x in r)
    assert record("2", "FLOPs ratio MS3+/std", worst <= 0.02, f"{r[0]:.4f} vs 0.678 with {cfg.num_blocks} blocks")


@pytest.mark.xfail(strict=True, reason="depth-only deepening cannot meet both MS3+ ratios; see README")
def test_deeper_ms3_params(deeper_ms3):
    cfg, net, base = deeper_ms3
    r = count_params(net) / count_params(base)
    assert record("2", "params ratio MS3+/std", abs(r - 0.748) <= 0.02, f"{r:.4f} vs 0.748 with {cfg.num_blocks} blocks")


# ---------------------------------------------------------------------------
# 3. exact identities

def test_unfold_identity():
    c = V.check_unfold(np.random.default_rng(3), cases=24)
    assert record("3a", c.name, c.passed, c.detail)


def test_rearrangement_identity():
    c = V.check_rearrangement(np.random.default_rng(3))
    assert record("3b", c.name, c.passed, c.detail)


# ---------------------------------------------------------------------------
# 4. gradients

def test_gradients():
    rng = np.random.default_rng(4)
    errs = V.op_gradchecks(rng) + V.unit_gradchecks(rng)
    bad = [(n, e) for n, e in errs if not e < V.GRAD_TOL]
    worst = max(e for _, e in errs)
    assert record("4", f"gradients of {len(errs)} ops and units", not bad, f"max rel err {worst:.2e}, failing {[n for n, _ in bad]}")


def test_shared_gradient():
    err = V.shared_site_gradient(np.random.default_rng(4))
    assert record("4", "shared MS3 weight gradient equals summed per-site finite differences", err < V.GRAD_TOL, f"max rel err {err:.2e}")


# ---------------------------------------------------------------------------
# 5. sharing economics

def unit_params(unit):
    return sum(p.size() for p in unique_parameters(unit.parameters()))


def diagonal_flops(unit, hw):
    e = unit.spec.entries
    return [e[i][i].flops((hw[0] >> i, hw[1] >> i)) for i in range(len(e))]


def test_ms2_to_ms3():
    ok, notes = True, []
    for widths in ((64, 64), (32, 32), (5, 5)):
        a, b = build_variant("ms2", 2, widths), build_variant("ms3", 2, widths)
        ok &= unit_params(b) < unit_params(a) and diagonal_flops(a, (32, 32)) == diagonal_flops(b, (32, 32))
        notes.append(f"{unit_params(a)}->{unit_params(b)}")
    na, nb = params_of("ms2"), params_of("ms3")
    ok &= nb < na
    assert record("5", "MS2 to MS3 lowers params, keeps diagonal FLOPs", ok, f"units {' '.join(notes)}; network {na}->{nb}")


def test_ms3_to_large():
    small, large = build_network(ModelConfig(variant="ms3")), build_network(ModelConfig(variant="ms3_large"))
    delta = 0
    for _, layer in small.layers():
        if isinstance(layer, MSConvUnit) and layer.shared:
            for i, j in ((0, 1), (1, 0)):
                delta += layer.spec.out_channels[i] * layer.spec.in_channels[j] * (3 * 3 - 1)
    got = count_params(large) - count_params(small)
    assert record("5", "MS3 to MS3-large adds the 1x1-to-3x3 delta", got == delta, f"{got} vs closed form {delta}")


# ---------------------------------------------------------------------------
# 6-7. desk-scale training and determinism

@pytest.fixture(scope="module")
def desk_data():
    return desk_images(desk_train().seed)


@pytest.fixture(scope="module")
def desk_runs(desk_data):
    return {v: run_desk(v, images=desk_data) for v in DESK_VARIANTS}


@pytest.mark.slow
@pytest.mark.parametrize("variant", DESK_VARIANTS)
def test_desk_loss_decreases(desk_runs, variant):
    r = desk_runs[variant]
    assert record("6", f"{variant} smoothed loss decreases", r.improved, f"{r.smoothed_first:.4f} -> {r.smoothed_last:.4f}")


@pytest.mark.slow
@pytest.mark.parametrize("variant", DESK_VARIANTS)
def test_desk_beats_bicubic(desk_runs, variant):
    r = desk_runs[variant]
    assert record("6", f"{variant} eval PSNR above bicubic", r.beats_bicubic, f"{r.psnr:.3f} vs {r.bicubic:.3f} dB")


@pytest.mark.slow
@pytest.mark.parametrize("variant", DESK_VARIANTS)
def test_desk_determinism(desk_runs, desk_data, variant):
    again = run_desk(variant, images=desk_data)
    a, b = np.asarray(desk_runs[variant].losses), np.asarray(again.losses)
    same = a.shape == b.shape and np.array_equal(a, b)
    assert record("7", f"{variant} repeat reproduces loss curve bit-exactly", same, f"{len(a)} iterations")


# ---------------------------------------------------------------------------
# 8. pilot suite

@pytest.fixture(scope="module")
def pilot_results(desk_data):
    return {r.case: r for r in run_pilot_suite(train_images=desk_data[0], eval_images=desk_data[1])}


@pytest.mark.slow
def test_pilot_trains(pilot_results):
    ok = set(pilot_results) == set(CASES) and all(np.all(np.isfinite(r.losses)) for r in pilot_results.values())
    detail = " ".join(f"{c}={r.psnr:.2f}" for c, r in sorted(pilot_results.items())) + f" dB (bicubic {next(iter(pilot_results.values())).bicubic:.2f})"
    assert record("8", "all five pilot cases train without divergence", ok, detail)


def test_pilot_structure():
    from msconv.pilot import build_pilot_case

    rng = np.random.default_rng(8)
    c = build_pilot_case("c", 16, 16, rng)
    distinct = len(unique_parameters(c.parameters()))
    counts = {k: sum(p.size() for p in unique_parameters(build_pilot_case(k, 16, 16, rng).parameters())) for k in "ad"}
    ok = distinct == 1 and counts["a"] == counts["d"]
    assert record("8", "case c shares one Parameter, cases a and d have equal params", ok, f"c distinct={distinct}, a={counts['a']}, d={counts['d']}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
