"""Rank-4 tensors, shared parameters and a tape-based reverse mode.

Every activation is an ``(N, C, H, W)`` array.  Operations that touch a
:class:`Parameter` or a tensor that requires a gradient append a record to the
current thread's :class:`Tape`; :func:`backward` replays the tape in reverse.
"""
from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    """Immutable ``(N, C, H, W)`` value with an optional link into a tape."""

    __slots__ = ("data", "node", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor must be rank 4, got shape {arr.shape}")
        self.data = arr
        self.node: int | None = None
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # operator sugar for tests and scripts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, a):
        return scale(self, a)

    __rmul__ = __mul__


_share_ids = itertools.count()


class Parameter:
    """Convolution weight ``(C_out, C_in, k, k)`` plus bias ``(C_out,)``.

    Parameters with the same ``share_id`` refer to the same arrays, so an
    in-place update through one alias is visible through every other.
    ``sub`` returns a leading-block view used when scales of different width
    share one kernel.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, share_id: int | None = None):
        self.weight = weight
        self.bias = np.zeros(weight.shape[0], dtype=weight.dtype) if bias is None else bias
        self.gweight = np.zeros_like(self.weight)
        self.gbias = np.zeros_like(self.bias)
        self.share_id = next(_share_ids) if share_id is None else share_id
        self.base: Parameter = self

    @classmethod
    def init(cls, c_out: int, c_in: int, k: int, rng: np.random.Generator, dtype=np.float64) -> "Parameter":
        bound = 1.0 / np.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
        return cls(w)

    @property
    def shape(self):
        return self.weight.shape

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]

    def size(self) -> int:
        return self.weight.size + self.bias.size

    def alias(self) -> "Parameter":
        p = object.__new__(Parameter)
        p.__dict__.update(self.__dict__)
        return p

    def sub(self, c_out: int, c_in: int) -> "Parameter":
        if c_out > self.weight.shape[0] or c_in > self.weight.shape[1]:
            raise ValueError("sub-block larger than parameter")
        p = object.__new__(Parameter)
        p.weight = self.weight[:c_out, :c_in]
        p.bias = self.bias[:c_out]
        p.gweight = self.gweight[:c_out, :c_in]
        p.gbias = self.gbias[:c_out]
        p.share_id = self.share_id
        p.base = self.base
        return p

    def zero_grad(self):
        self.base.gweight[...] = 0
        self.base.gbias[...] = 0

    def arrays(self):
        """(value, grad) pairs, in-place updatable."""
        return [(self.weight, self.gweight), (self.bias, self.gbias)]

    def __repr__(self):
        return f"Parameter(shape={self.weight.shape}, share_id={self.share_id})"


def unique_parameters(params) -> list[Parameter]:
    """Distinct base parameters, first-seen order."""
    seen, out = set(), []
    for p in params:
        b = p.base
        if b.share_id not in seen:
            seen.add(b.share_id)
            out.append(b)
    return out


# ---------------------------------------------------------------------------
# tape

@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def append(self, rec: Record) -> int:
        self.records.append(rec)
        return len(self.records) - 1

    def clear(self):
        self.records.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextmanager
def using_tape(tape: Tape):
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def _emit(op: str, out: np.ndarray, inputs: tuple, vjp, params: tuple = ()) -> Tensor:
    _check(out, op)
    t = Tensor(out)
    if _grad_enabled() and (params or any(x.requires_grad for x in inputs)):
        t.requires_grad = True
        t.node = current_tape().append(Record(op, inputs, t, vjp))
    return t


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's grad.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad``.  The
    tape is cleared afterwards.
    """
    if loss.node is None:
        raise RuntimeError("backward on a tensor that is not on the tape")
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar (1,1,1,1) loss")
    tape = tape or current_tape()
    recs = tape.records
    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for idx in range(loss.node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        rec = recs[idx]
        for x, gx in zip(rec.inputs, rec.vjp(g)):
            if gx is None or not x.requires_grad:
                continue
            if x.node is not None:
                prev = grads.get(x.node)
                grads[x.node] = gx if prev is None else prev + gx
            else:
                x.grad = gx.copy() if x.grad is None else x.grad + gx
    tape.clear()


# ---------------------------------------------------------------------------
# convolution

def conv_output_size(h: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1


_COL_LIMIT = 1 << 22  # im2col elements above which the per-tap path is used


def _im2col(a: np.ndarray, k: int, dilation: int, padding: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows ordered (n, ho, wo); columns ordered (ki, kj, c)."""
    if padding:
        a = np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = dilation * (k - 1) + 1
    win = sliding_window_view(a, (span, span), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]
    n, c = a.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(n * ho * wo, k * k * c)


def conv2d(x: Tensor, w: Parameter, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation plus per-channel bias."""
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.weight.shape
    if ci != c or k != k2:
        raise ValueError(f"conv2d: weight {w.weight.shape} does not match input {x.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride, dilation >= 1 and padding >= 0 required")
    ho = conv_output_size(h, k, stride, dilation, padding)
    wo = conv_output_size(wd, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo}")

    wt, bias = w.weight, w.bias
    dt = np.result_type(x.data, wt)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    taps = [(i, j) for i in range(k) for j in range(k)]
    use_cols = n * c * ho * wo * k * k <= _COL_LIMIT

    def tap(a, i, j):
        r0, c0 = i * dilation, j * dilation
        return a[:, :, r0 : r0 + hs : stride, c0 : c0 + ws : stride]

    if use_cols:
        cols = _im2col(x.data, k, dilation, padding, stride, ho, wo)
        w2 = wt.transpose(0, 2, 3, 1).reshape(co, k * k * c)
        out = (cols @ w2.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
        acc = np.zeros((co, n, ho, wo), dtype=dt)
        for i, j in taps:
            acc += np.tensordot(wt[:, :, i, j], tap(xt, i, j), axes=(1, 0))
        out = acc.transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out, dtype=dt) + bias.reshape(1, -1, 1, 1)

    def vjp(g):
        w.gbias[...] += g.sum(axis=(0, 2, 3))
        if use_cols:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)
            w.gweight[...] += (g2.T @ cols).reshape(co, k, k, c).transpose(0, 3, 1, 2)
            if not x.requires_grad:
                return (None,)
            q = dilation * (k - 1) - padding
            if stride == 1 and q >= 0:
                # input gradient is a correlation of the padded output
                # gradient with the spatially flipped, transposed kernel
                wf = wt[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * co, c)
                gx = _im2col(g, k, dilation, q, 1, h, wd) @ wf
                return (gx.reshape(n, h, wd, c).transpose(0, 3, 1, 2),)
            gcols = (g2 @ w2).reshape(n, ho, wo, k, k, c)
            gl = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=dt)
            for i, j in taps:
                r0, c0 = i * dilation, j * dilation
                gl[:, r0 : r0 + hs : stride, c0 : c0 + ws : stride] += gcols[:, :, :, i, j]
            gxp = gl.transpose(0, 3, 1, 2)
        else:
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
            for i, j in taps:
                w.gweight[:, :, i, j] += np.tensordot(gt, tap(xt, i, j), axes=([1, 2, 3], [1, 2, 3]))
            if not x.requires_grad:
                return (None,)
            gxt = np.zeros((c,) + xp.shape[:1] + xp.shape[2:], dtype=dt)
            for i, j in taps:
                tap(gxt, i, j)[...] += np.tensordot(wt[:, :, i, j], gt, axes=(0, 0))
            gxp = gxt.transpose(1, 0, 2, 3)
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + wd]
        return (gxp,)

    return _emit("conv2d", out, (x,), vjp, params=(w,))


def conv_flops(c_out: int, c_in: int, k: int, h_out: int, w_out: int) -> int:
    """Multiply-adds of one convolution per sample."""
    return c_out * c_in * k * k * h_out * w_out


# ---------------------------------------------------------------------------
# resampling

def _check_even(x: Tensor, op: str):
    _, _, h, w = x.shape
    if h == 0 or w == 0:
        raise ValueError(f"{op}: empty spatial dims")
    if h % 2 or w % 2:
        raise ValueError(f"{op}: spatial dims must be even, got {h}x{w}")


def _blocks(a: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // 2, 2, w // 2, 2)


def avg_pool2(x: Tensor) -> Tensor:
    _check_even(x, "avg_pool2")
    out = _blocks(x.data).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g / 4.0, 2, axis=2), 2, axis=3),)

    return _emit("avg_pool2", out, (x,), vjp)


def max_pool2(x: Tensor) -> Tensor:
    _check_even(x, "max_pool2")
    n, c, h, w = x.shape
    flat = _blocks(x.data).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)  # first maximum in row-major block order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _emit("max_pool2", out, (x,), vjp)


def avg_pool2_s1(x: Tensor) -> Tensor:
    """2x2 mean at stride 1; the window at (i, j) covers rows i..i+1 and
    columns j..j+1, with zeros past the bottom/right edge."""
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, 1), (0, 1)))
    out = 0.25 * (xp[:, :, :-1, :-1] + xp[:, :, 1:, :-1] + xp[:, :, :-1, 1:] + xp[:, :, 1:, 1:])

    def vjp(g):
        gp = np.pad(g, ((0, 0), (0, 0), (1, 0), (1, 0)))
        gx = 0.25 * (gp[:, :, 1:, 1:] + gp[:, :, :-1, 1:] + gp[:, :, 1:, :-1] + gp[:, :, :-1, :-1])
        return (gx,)

    return _emit("avg_pool2_s1", out, (x,), vjp)


def nearest_upsample2(x: Tensor) -> Tensor:
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (_blocks(g).sum(axis=(3, 5)),)

    return _emit("nearest_upsample2", out, (x,), vjp)


def nearest_subsample2(x: Tensor) -> Tensor:
    """Keep the top-left element of every 2x2 block."""
    _check_even(x, "nearest_subsample2")
    out = np.ascontiguousarray(x.data[:, :, ::2, ::2])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::2, ::2] = g
        return (gx,)

    return _emit("nearest_subsample2", out, (x,), vjp)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by {r}^2")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def vjp(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return _emit("pixel_shuffle", np.ascontiguousarray(out), (x,), vjp)


# ---------------------------------------------------------------------------
# elementwise and structural

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def _same_shape(x: Tensor, y: Tensor, op: str):
    if x.shape != y.shape:
        raise ValueError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")
    return _emit("add", x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "sub")
    return _emit("sub", x.data - y.data, (x, y), lambda g: (g, -g))


def scale(x: Tensor, a: float) -> Tensor:
    return _emit("scale", x.data * a, (x,), lambda g: (g * a,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array of the same shape."""
    c = np.asarray(c, dtype=x.dtype)
    if c.shape != x.shape:
        raise ValueError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return _emit("mul_const", x.data * c, (x,), lambda g: (g * c,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _emit("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    out = x.data.mean().reshape(1, 1, 1, 1)
    return _emit("mean", out, (x,), lambda g: (np.full(x.shape, g.item() / size, dtype=x.dtype),))


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum().reshape(1, 1, 1, 1)
    return _emit("sum", out, (x,), lambda g: (np.full(x.shape, g.item(), dtype=x.dtype),))


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels."""
    if len(xs) == 1:
        return xs[0]
    spatial = {x.shape[0:1] + x.shape[2:] for x in xs}
    if len(spatial) != 1:
        raise ValueError("concat: batch/spatial dims differ")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    out = np.concatenate([x.data for x in xs], axis=1)

    def vjp(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _emit("concat", out, tuple(xs), vjp)


def take_channels(x: Tensor, index) -> Tensor:
    """Select channels by slice or index array."""
    out = np.ascontiguousarray(x.data[:, index])

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        if isinstance(index, slice):
            gx[:, index] += g
        else:
            np.add.at(gx, (slice(None), np.asarray(index)), g)
        return (gx,)

    return _emit("take_channels", out, (x,), vjp)


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# raw dump format: "MSTN", u32 version, u32 dtype, 4 x u64 shape, payload

_MAGIC = b"MSTN"
_HEADER = struct.Struct("<4sII4Q")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dump_tensor(f: BinaryIO, arr) -> None:
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    if a.ndim > 4:
        raise ValueError("at most rank 4")
    shape = (1,) * (4 - a.ndim) + a.shape
    code = _DTYPE_CODES[a.dtype]
    f.write(_HEADER.pack(_MAGIC, 1, code, *shape))
    f.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())


def load_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated tensor header")
    magic, version, code, *shape = _HEADER.unpack(head)
    if magic != _MAGIC or version != 1:
        raise ValueError("not an MSTN v1 tensor")
    if code not in (0, 1):
        raise ValueError(f"unknown dtype code {code}")
    dt = np.dtype("<f4" if code == 0 else "<f8")
    count = int(np.prod(shape))
    buf = f.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype=dt).astype(dt.newbyteorder("=")).reshape(shape)
