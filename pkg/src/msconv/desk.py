"""Desk-scale training setup shared by the acceptance suite, the pilot suite
and the experiment scripts.

A 4-block SRResNet at width 16 trained for 2,000 iterations on seeded toy
images, in float64 so repeated runs are bit-identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .networks import ModelConfig, build_network
from .pipeline import TrainConfig, bicubic_baseline, evaluate, toy_images, train_loop

DESK_VARIANTS = ("baseline", "ms", "ms2", "ms3")
DESK_TRAIN_IMAGES = 16
DESK_EVAL_IMAGES = 4
DESK_IMAGE_SIZE = 96
EVAL_SEED_OFFSET = 7919


def desk_model(variant: str = "baseline", **overrides) -> ModelConfig:
    kw = dict(num_blocks=4, width=16, head_kernel=3, upscale=4, dtype="float64", seed=0)
    kw.update(overrides)
    return ModelConfig(variant=variant, **kw)


def desk_train(**overrides) -> TrainConfig:
    kw = dict(batch=4, hr_patch=48, lr=1e-3, total_iters=2000, halve_every=500, seed=0)
    kw.update(overrides)
    return TrainConfig(**kw)


def desk_images(seed: int = 0) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Held-out toy images use a disjoint seed."""
    train = toy_images(DESK_TRAIN_IMAGES, DESK_IMAGE_SIZE, seed)
    held_out = toy_images(DESK_EVAL_IMAGES, DESK_IMAGE_SIZE, seed + EVAL_SEED_OFFSET)
    return train, held_out


@dataclass
class DeskRun:
    variant: str
    psnr: float
    bicubic: float
    losses: list[float] = field(repr=False, default_factory=list)
    smoothed_first: float = float("nan")
    smoothed_last: float = float("nan")

    @property
    def improved(self) -> bool:
        return self.smoothed_last < self.smoothed_first

    @property
    def beats_bicubic(self) -> bool:
        return self.psnr > self.bicubic


def run_desk(
    variant: str,
    train_cfg: TrainConfig | None = None,
    model_overrides: dict | None = None,
    images: tuple[Sequence[np.ndarray], Sequence[np.ndarray]] | None = None,
    body_layer: Callable | None = None,
    window: int = 100,
) -> DeskRun:
    tc = train_cfg or desk_train()
    cfg = desk_model(variant, **(model_overrides or {}))
    train, held_out = images if images is not None else desk_images(tc.seed)
    net = build_network(cfg, body_layer)
    rec, _ = train_loop(net, train, replace(tc), iters=tc.total_iters)
    s = rec.smoothed(window)
    return DeskRun(
        variant,
        float(np.mean(evaluate(net, held_out))),
        float(np.mean(bicubic_baseline(held_out, cfg.upscale))),
        rec.losses,
        float(s[0]),
        float(s[-1]),
    )
