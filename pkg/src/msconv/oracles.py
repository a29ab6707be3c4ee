"""Slow, independent reference implementations used by verification.

Nothing here shares code with the fast paths in :mod:`msconv.tensor`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def direct_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride=1, dilation=1, padding=0, counter: list | None = None) -> np.ndarray:
    """Nested-loop zero-padded cross-correlation.  ``counter[0]`` is
    incremented once per multiplication when given."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    s = b[o]
                    for ch in range(c):
                        for u in range(k):
                            for v in range(k):
                                r = i * stride + u * dilation - padding
                                q = j * stride + v * dilation - padding
                                if counter is not None:
                                    counter[0] += 1
                                if 0 <= r < h and 0 <= q < wd:
                                    s += x[bi, ch, r, q] * w[o, ch, u, v]
                    out[bi, o, i, j] = s
    return out


def avg_pool_ref(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = (x[:, :, 2 * i, 2 * j] + x[:, :, 2 * i + 1, 2 * j] + x[:, :, 2 * i, 2 * j + 1] + x[:, :, 2 * i + 1, 2 * j + 1]) / 4
    return out


def max_pool_ref(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max and a mask marking the first maximum of each block (row-major)."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    mask = np.zeros(x.shape, dtype=bool)
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best, pos = -np.inf, None
                    for u in range(2):
                        for v in range(2):
                            val = x[a, ch, 2 * i + u, 2 * j + v]
                            if val > best:
                                best, pos = val, (2 * i + u, 2 * j + v)
                    out[a, ch, i, j] = best
                    mask[a, ch, pos[0], pos[1]] = True
    return out, mask


def upsample_ref(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            out[:, :, i, j] = x[:, :, i // 2, j // 2]
    return out


def pixel_shuffle_ref(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c // (r * r), h * r, w * r))
    for ch in range(c):
        o, sub = divmod(ch, r * r)
        dy, dx = divmod(sub, r)
        for i in range(h):
            for j in range(w):
                out[:, o, i * r + dy, j * r + dx] = x[:, ch, i, j]
    return out


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor] = (),
    params: Sequence[Parameter] = (),
    h: float = 1e-5,
    max_coords: int = 40,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference
    gradients of ``sum(fn() * R)`` for a fixed random ``R``.

    ``fn`` must rebuild its graph on every call from ``tensors`` and
    ``params`` (which are perturbed in place).  At most ``max_coords``
    coordinates per array are probed.
    """
    rng = np.random.default_rng(seed)
    with T.no_grad():
        proj = rng.standard_normal(fn().shape)

    def value() -> float:
        with T.no_grad():
            return float(np.sum(fn().data * proj))

    base = T.unique_parameters(params)
    for p in base:
        p.zero_grad()
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    tape = T.Tape()
    with T.using_tape(tape):
        out = fn()
        loss = T.sum_all(T.mul_const(out, proj))
        T.backward(loss, tape)
    targets = [(t.data, t.grad if t.grad is not None else np.zeros_like(t.data)) for t in tensors]
    for p in base:
        targets.extend([(p.weight, p.gweight.copy()), (p.bias, p.gbias.copy())])
    worst = 0.0
    for arr, grad in targets:
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = value()
            flat[i] = old - h
            fm = value()
            flat[i] = old
            num[n] = (fp - fm) / (2 * h)
        worst = max(worst, rel_error(grad.reshape(-1)[idx], num))
    return worst
