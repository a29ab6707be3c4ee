"""Super-resolution data preparation, training and evaluation.

Images are float arrays shaped ``(3, H, W)`` with values in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .networks import Network, forward_sr, infer_padded, load_checkpoint, save_checkpoint
from .tensor import NonFiniteError, Parameter, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch: int = 16
    hr_patch: int = 128
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    halve_every: int = 250_000
    total_iters: int = 1_000_000
    loss: str = "l1"
    seed: int = 0
    augment: bool = True
    log_every: int = 100
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        if self.batch < 1 or self.hr_patch < 1 or self.total_iters < 0:
            raise ValueError("batch, hr_patch must be positive and total_iters non-negative")
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise ValueError("lr must be finite and non-negative")
        if not all(0 <= b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be two values in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.halve_every < 1 or (self.total_iters and self.halve_every > self.total_iters):
            raise ValueError("halve_every must be in [1, total_iters]")
        if self.loss != "l1":
            raise ValueError("only the l1 loss is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DatasetSpec:
    hr_dir: str | None = None
    sub_image: int = 480
    stride: int = 240
    upscale: int = 4
    split: str = "train"
    synthetic: int = 0  # > 0: generate this many toy images instead of reading hr_dir
    synthetic_size: int = 96

    def __post_init__(self):
        if self.split not in ("train", "eval"):
            raise ValueError("split must be train or eval")
        if self.sub_image % self.upscale:
            raise ValueError("sub_image must be divisible by upscale")
        if self.hr_dir is None and self.synthetic <= 0:
            raise ValueError("either hr_dir or synthetic must be set")


# ---------------------------------------------------------------------------
# bicubic resampling

def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1,
        (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def _mirror(idx: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


@lru_cache(maxsize=64)
def resize_matrix(n_in: int, scale: Fraction) -> np.ndarray:
    """Dense ``(n_out, n_in)`` bicubic interpolation matrix with antialiasing
    on downscale and symmetric boundary reflection."""
    s = float(scale)
    n_out = int(math.floor(n_in * s + 0.5))
    if n_out < 1:
        raise ValueError(f"resize of {n_in} by {scale} is empty")
    stretch = min(s, 1.0)
    half = 2.0 / stretch
    centers = (np.arange(n_out) + 0.5) / s - 0.5
    left = np.floor(centers - half).astype(int)
    taps = int(math.ceil(2 * half)) + 2
    j = left[:, None] + np.arange(taps)[None, :]
    w = cubic((centers[:, None] - j) * stretch)
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), _mirror(j, n_in).ravel()), w.ravel())
    return m


def bicubic_resize(img: np.ndarray, scale) -> np.ndarray:
    """Resize the last two axes by ``scale`` (output dims ``round(dim*scale)``)."""
    scale = Fraction(scale).limit_denominator(1 << 16)
    if scale <= 0:
        raise ValueError("scale must be positive")
    if scale == 1:
        return np.array(img, dtype=np.float64)
    mh = resize_matrix(img.shape[-2], scale)
    mw = resize_matrix(img.shape[-1], scale)
    return np.einsum("ih,...hw,jw->...ij", mh, img, mw, optimize=True)


# ---------------------------------------------------------------------------
# data

def toy_images(n: int, size: int, seed: int) -> list[np.ndarray]:
    """Seeded synthetic images: smooth colour gradients with hard-edged
    rectangles, discs and stripes, overlaid with band-limited texture.

    The texture (sinusoids with 6-24 px periods) is what gives a learned
    upscaler something to recover beyond bicubic within a short budget;
    flat shapes alone leave almost no headroom.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = []
    for _ in range(n):
        c0, c1 = rng.random(3), rng.random(3)
        t = (rng.random() * xx + rng.random() * yy) / 2
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        for _ in range(rng.integers(3, 7)):
            col = rng.random(3)[:, None, None]
            kind = rng.integers(3)
            if kind == 0:
                y0, x0 = rng.random(2) * 0.8
                h, w = 0.1 + rng.random(2) * 0.4
                mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
            elif kind == 1:
                cy, cx = rng.random(2)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < (0.05 + 0.2 * rng.random()) ** 2
            else:
                ang = rng.random() * np.pi
                # 12-24 px periods stay resolvable after 4x downscaling
                period = (12 + 12 * rng.random()) / size
                mask = np.mod(np.cos(ang) * xx + np.sin(ang) * yy, period) < period / 2
            img = np.where(mask[None], col, img)
        out.append(img)
    trng = np.random.default_rng([seed, 1])
    py, px = np.mgrid[0:size, 0:size].astype(float)
    for k, img in enumerate(out):
        tex = np.zeros_like(img)
        for _ in range(12):
            ang, phase = trng.random() * np.pi, trng.random() * 2 * np.pi
            period = 6 + 18 * trng.random()
            wave = np.sin(2 * np.pi * (np.cos(ang) * px + np.sin(ang) * py) / period + phase)
            tex += 0.06 * (0.5 + trng.random(3))[:, None, None] * wave
        out[k] = np.clip(0.8 * img + 0.1 + tex, 0, 1)
    return out


def sub_images(img: np.ndarray, size: int, stride: int) -> list[np.ndarray]:
    """Overlapping ``size`` x ``size`` crops at ``stride``; images smaller
    than ``size`` are returned whole."""
    h, w = img.shape[1:]
    if h < size or w < size:
        return [img]
    ys = list(range(0, h - size + 1, stride))
    xs = list(range(0, w - size + 1, stride))
    return [img[:, y : y + size, x : x + size] for y in ys for x in xs]


def load_dataset(spec: DatasetSpec, seed: int = 0) -> list[np.ndarray]:
    if spec.synthetic > 0:
        imgs = toy_images(spec.synthetic, spec.synthetic_size, seed + (spec.split == "eval") * 7919)
    else:
        from .imageio import read_image

        paths = sorted(p for p in Path(spec.hr_dir).iterdir() if p.suffix.lower() in (".ppm", ".pgm"))
        if not paths:
            raise FileNotFoundError(f"no .ppm/.pgm images in {spec.hr_dir}")
        imgs = [read_image(p) for p in paths]
        if spec.split == "train":
            imgs = [s for im in imgs for s in sub_images(im, spec.sub_image, spec.stride)]
    r = spec.upscale
    return [im[:, : im.shape[1] // r * r, : im.shape[2] // r * r] for im in imgs]


def augment(img: np.ndarray, hflip: bool, vflip: bool, rot: bool) -> np.ndarray:
    if hflip:
        img = img[:, :, ::-1]
    if vflip:
        img = img[:, ::-1, :]
    if rot:
        img = np.rot90(img, 1, axes=(1, 2))
    return np.ascontiguousarray(img)


def sample_patch(hr: np.ndarray, cfg: TrainConfig, upscale: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random aligned ``(lr, hr)`` patch pair with identical augmentation."""
    p = cfg.hr_patch
    if p % upscale:
        raise ValueError("hr_patch must be divisible by upscale")
    h, w = hr.shape[1:]
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} smaller than patch {p}")
    y = int(rng.integers(0, h - p + 1))
    x = int(rng.integers(0, w - p + 1))
    hp = hr[:, y : y + p, x : x + p]
    lp = bicubic_resize(hp, Fraction(1, upscale))
    flips = rng.random(3) < 0.5
    if cfg.augment:
        hp, lp = augment(hp, *flips), augment(lp, *flips)
    return lp, np.ascontiguousarray(hp)


def make_batch(images: Sequence[np.ndarray], cfg: TrainConfig, upscale: int, it: int, dtype) -> tuple[Tensor, Tensor]:
    """Batch for iteration ``it``; a pure function of ``(cfg.seed, it)``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it]))
    pairs = [sample_patch(images[int(rng.integers(len(images)))], cfg, upscale, rng) for _ in range(cfg.batch)]
    lr = np.stack([a for a, _ in pairs]).astype(dtype)
    hr = np.stack([b for _, b in pairs]).astype(dtype)
    return Tensor(lr), Tensor(hr)


# ---------------------------------------------------------------------------
# optimisation

def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return T.mean(T.abs_(T.sub(pred, target)))


def lr_at(it: int, cfg: TrainConfig) -> float:
    return cfg.lr * 0.5 ** (it // cfg.halve_every)


@dataclass
class AdamState:
    m: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    v: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float, betas=(0.9, 0.999), eps=1e-8) -> None:
    """One bias-corrected Adam update in place; shared parameters update once."""
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for p in T.unique_parameters(params):
        key = p.share_id
        if key not in state.m:
            state.m[key] = (np.zeros_like(p.weight), np.zeros_like(p.bias))
            state.v[key] = (np.zeros_like(p.weight), np.zeros_like(p.bias))
        for k, (arr, g) in enumerate(((p.weight, p.gweight), (p.bias, p.gbias))):
            m, v = state.m[key][k], state.v[key][k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# evaluation

def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing luma of a ``(3, H, W)`` image in ``[0, 1]``."""
    r, g, b = img[0], img[1], img[2]
    return 16 / 255 + (65.481 * r + 128.553 * g + 24.966 * b) / 255


def psnr_y(sr: np.ndarray, hr: np.ndarray, border: int = 0) -> float:
    if sr.shape != hr.shape or sr.ndim != 3 or sr.shape[0] != 3:
        raise ValueError(f"need equal (3, H, W) shapes, got {sr.shape} and {hr.shape}")
    a = np.clip(rgb_to_y(sr.astype(np.float64)), 0, 1)
    b = np.clip(rgb_to_y(hr.astype(np.float64)), 0, 1)
    if border:
        a, b = a[border:-border, border:-border], b[border:-border, border:-border]
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1 / mse)


def degrade(hr: np.ndarray, upscale: int) -> np.ndarray:
    return bicubic_resize(hr, Fraction(1, upscale))


def bicubic_baseline(images: Sequence[np.ndarray], upscale: int, border: int | None = None) -> list[float]:
    b = upscale if border is None else border
    return [psnr_y(np.clip(bicubic_resize(degrade(hr, upscale), upscale), 0, 1), hr, b) for hr in images]


def evaluate(net: Network, images: Sequence[np.ndarray], border: int | None = None) -> list[float]:
    r = net.cfg.upscale
    b = r if border is None else border
    out = []
    for hr in images:
        sr = infer_padded(net, degrade(hr, r))
        out.append(psnr_y(np.clip(sr, 0, 1), hr, b))
    return out


# ---------------------------------------------------------------------------
# training

@dataclass
class RunRecord:
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    start_iter: int = 0

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses)
        w = max(1, min(window, len(x)))
        return np.convolve(x, np.ones(w) / w, mode="valid")

    def improved(self, window: int = 100) -> bool:
        s = self.smoothed(window)
        return len(s) > 1 and s[-1] < s[0]

    def to_lines(self, cfg: TrainConfig) -> list[str]:
        ev = dict(self.evals)
        lines = []
        for k, loss in enumerate(self.losses):
            it = self.start_iter + k
            psnr = f" psnr={ev[it]:.4f}" if it in ev else ""
            lines.append(f"iter={it} lr={lr_at(it, cfg):.6g} loss={loss!r}{psnr}")
        return lines


def _adam_tensors(net: Network, state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name, p in net.named_parameters():
        if p.share_id in state.m:
            for k, suffix in enumerate(("weight", "bias")):
                out[f"adam.m.{name}.{suffix}"] = state.m[p.share_id][k]
                out[f"adam.v.{name}.{suffix}"] = state.v[p.share_id][k]
    return out


def _restore_adam(net: Network, tensors: dict[str, np.ndarray], t: int) -> AdamState:
    st = AdamState(t=t)
    for name, p in net.named_parameters():
        key = f"adam.m.{name}.weight"
        if key in tensors:
            st.m[p.share_id] = (tensors[key].reshape(p.weight.shape).copy(), tensors[f"adam.m.{name}.bias"].reshape(p.bias.shape).copy())
            st.v[p.share_id] = (tensors[f"adam.v.{name}.weight"].reshape(p.weight.shape).copy(), tensors[f"adam.v.{name}.bias"].reshape(p.bias.shape).copy())
    return st


def save_training_state(path, net: Network, cfg: TrainConfig, state: AdamState, next_iter: int) -> None:
    extra = {"train": cfg.to_dict(), "next_iter": next_iter, "adam_t": state.t}
    save_checkpoint(path, net, extra, _adam_tensors(net, state))


def load_training_state(path, body_layer=None) -> tuple[Network, TrainConfig, AdamState, int]:
    net, extra, tensors = load_checkpoint(path, body_layer)
    cfg = TrainConfig.from_dict(extra["train"])
    return net, cfg, _restore_adam(net, tensors, extra["adam_t"]), extra["next_iter"]


def train_loop(
    net: Network,
    images: Sequence[np.ndarray],
    cfg: TrainConfig,
    iters: int | None = None,
    state: AdamState | None = None,
    start_iter: int = 0,
    eval_images: Sequence[np.ndarray] | None = None,
    checkpoint_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[RunRecord, AdamState]:
    """Train ``net`` in place with L1 loss and Adam.

    Data for iteration ``i`` depends only on ``(cfg.seed, i)`` so a run
    resumed from a checkpoint continues exactly where it stopped.
    """
    iters = cfg.total_iters if iters is None else iters
    state = state or AdamState()
    rec = RunRecord(start_iter=start_iter)
    params = net.parameters()
    dtype = net.cfg.np_dtype
    r = net.cfg.upscale
    tape = T.Tape()
    for it in range(start_iter, start_iter + iters):
        lr_t, hr_t = make_batch(images, cfg, r, it, dtype)
        for p in params:
            p.zero_grad()
        try:
            with T.using_tape(tape):
                loss = l1_loss(forward_sr(net, lr_t), hr_t)
                T.backward(loss, tape)
        except NonFiniteError as e:
            raise TrainingDiverged(f"non-finite value at iteration {it}: {e}") from e
        finally:
            tape.clear()
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite loss at iteration {it}")
        adam_step(params, state, lr_at(it, cfg), cfg.betas, cfg.eps)
        rec.losses.append(val)
        done = it + 1
        if eval_images is not None and cfg.eval_every and done % cfg.eval_every == 0:
            rec.evals.append((it, float(np.mean(evaluate(net, eval_images)))))
        if log is not None and cfg.log_every and done % cfg.log_every == 0:
            log(f"iter={it} lr={lr_at(it, cfg):.6g} loss={val:.6f}")
        if checkpoint_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_training_state(Path(checkpoint_dir) / f"iter{done:07d}.msck", net, cfg, state, done)
    return rec, state
