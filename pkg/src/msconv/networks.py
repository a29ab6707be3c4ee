"""SRResNet and CARN backbones built from multi-scale units.

A :class:`Network` is an ordered list of nodes; each node names its inputs
by index, so block residuals, the global residual and CARN's cascading
concatenations are explicit edges.  Every value flowing between nodes is a
:class:`~msconv.unified.ScaleFeatures`.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor
from .unified import (
    VARIANTS,
    MSConvUnit,
    ScaleFeatures,
    _unfold_by_index,
    build_first_conv,
    build_last_conv,
    build_variant,
    split_widths,
)

BACKBONES = ("srresnet", "carn")
NETWORK_VARIANTS = ("baseline",) + tuple(v for v in VARIANTS if v not in ("standard", "unet"))


@dataclass
class ModelConfig:
    backbone: str = "srresnet"
    variant: str = "baseline"
    num_blocks: int | None = None  # residual blocks (srresnet) or cascading groups (carn)
    width: int = 64
    branches: int = 2
    upscale: int = 4
    head_kernel: int = 9
    carn_group_size: int = 3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_blocks is None:
            self.num_blocks = 16 if self.backbone == "srresnet" else 3
        if self.variant == "baseline":
            self.branches = 1
        if self.variant == "multigrid":
            self.branches = 3
        self.validate()

    def validate(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.variant not in NETWORK_VARIANTS:
            raise ValueError(f"variant must be one of {NETWORK_VARIANTS}")
        if self.num_blocks < 0 or (self.backbone == "carn" and self.num_blocks < 1):
            raise ValueError("num_blocks out of range")
        if self.upscale < 1 or self.upscale & (self.upscale - 1):
            raise ValueError("upscale must be a power of two")
        if self.width < self.branches or self.width % 4:
            raise ValueError("width must be a multiple of 4 and at least the branch count")
        if self.head_kernel % 2 == 0:
            raise ValueError("head_kernel must be odd")
        if self.variant != "baseline" and self.branches < 2 and self.variant not in ("ms", "ms3"):
            raise ValueError(f"variant {self.variant} needs at least 2 branches")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def multiple(self) -> int:
        """Required divisibility of LR inputs."""
        return 2 ** (self.branches - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Node:
    name: str
    op: str  # unit | relu | add | shuffle | concat
    inputs: tuple[int, ...]  # -1 is the network input
    layer: object = None
    factor: int = 0


@dataclass
class Network:
    cfg: ModelConfig
    nodes: list[Node] = field(default_factory=list)
    final_layout: list | None = None  # set on unfolded networks

    def layers(self):
        return [(n.name, n.layer) for n in self.nodes if n.op == "unit"]

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        """Distinct base parameters with the name of their first use."""
        seen, out = set(), []
        for name, layer in self.layers():
            for idx, p in _indexed_params(layer):
                b = p.base
                if b.share_id not in seen:
                    seen.add(b.share_id)
                    out.append((f"{name}{idx}", b))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @property
    def multiple(self) -> int:
        """Required divisibility of LR inputs."""
        return max([self.cfg.multiple] + [getattr(layer, "multiple", 1) for _, layer in self.layers()])

    def __call__(self, x: Tensor) -> Tensor:
        return forward_sr(self, x)


def _indexed_params(layer):
    if isinstance(layer, MSConvUnit):
        for i, row in enumerate(layer.spec.entries):
            for j, e in enumerate(row):
                if e.param is not None:
                    yield f"[{i},{j}]", e.param
    else:
        for i, p in enumerate(layer.parameters()):
            yield f"[{i}]", p


class _Builder:
    def __init__(self, cfg: ModelConfig, body_layer: Callable | None = None):
        self.cfg = cfg
        self.net = Network(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.body_layer = body_layer
        self.s = cfg.branches

    def _add(self, name, op, inputs, layer=None, factor=0) -> int:
        self.net.nodes.append(Node(name, op, tuple(inputs), layer, factor))
        return len(self.net.nodes) - 1

    def widths(self, c):
        return split_widths(c, self.s)

    def unit(self, name, src, c_in, c_out, kernel=3, body=False, out_widths=None) -> int:
        cfg = self.cfg
        if body and self.body_layer is not None:
            layer = self.body_layer(c_in, c_out, self.rng, cfg.np_dtype)
        elif cfg.variant == "baseline":
            layer = build_variant("standard", 1, (c_in,), (c_out,), kernel, self.rng, cfg.np_dtype)
        else:
            outs = out_widths or self.widths(c_out)
            layer = build_variant(cfg.variant, self.s, self.widths(c_in), outs, kernel, self.rng, cfg.np_dtype)
        layer.name = name
        return self._add(name, "unit", (src,), layer)

    def relu(self, src):
        return self._add("relu", "relu", (src,))

    def add(self, a, b):
        return self._add("add", "add", (a, b))

    def concat(self, srcs):
        return self._add("concat", "concat", srcs)

    def head(self) -> int:
        cfg = self.cfg
        if self.s == 1:
            return self.unit("head", -1, 3, cfg.width, cfg.head_kernel)
        layer = build_first_conv(3, self.widths(cfg.width), cfg.head_kernel, self.rng, cfg.np_dtype)
        layer.name = "head"
        return self._add("head", "unit", (-1,), layer)

    def upsampler_and_tail(self, x) -> int:
        cfg = self.cfg
        for i in range(int(math.log2(cfg.upscale))):
            # each group must shuffle on its own, so widths scale per group
            x = self.unit(f"up.{i}", x, cfg.width, 4 * cfg.width, out_widths=tuple(4 * c for c in self.widths(cfg.width)))
            x = self._add("shuffle", "shuffle", (x,), factor=2)
            x = self.relu(x)
        x = self.relu(self.unit("hr", x, cfg.width, cfg.width))
        if self.s == 1:
            return self.unit("tail", x, cfg.width, 3, cfg.head_kernel)
        layer = build_last_conv(self.widths(cfg.width), 3, cfg.head_kernel, True, self.rng, cfg.np_dtype)
        layer.name = "tail"
        return self._add("tail", "unit", (x,), layer)


def build_srresnet(cfg: ModelConfig, body_layer: Callable | None = None) -> Network:
    """Head, residual blocks, mid unit with global residual, x2 upsamplers,
    HR unit, tail.  ``body_layer(c_in, c_out, rng, dtype)`` replaces the body
    convolutions when given."""
    if cfg.backbone != "srresnet":
        raise ValueError("config backbone is not srresnet")
    b = _Builder(cfg, body_layer)
    w = cfg.width
    x = skip = b.head()
    for i in range(cfg.num_blocks):
        y = b.unit(f"body.{i}.conv1", x, w, w, body=True)
        y = b.unit(f"body.{i}.conv2", b.relu(y), w, w, body=True)
        x = b.add(y, x)
    x = b.add(b.unit("mid", x, w, w, body=True), skip)
    b.upsampler_and_tail(x)
    return b.net


def build_carn(cfg: ModelConfig, body_layer: Callable | None = None) -> Network:
    """Cascading groups of residual blocks with 1x1 fusion at block and
    group level; head and tail as in :func:`build_srresnet`."""
    if cfg.backbone != "carn":
        raise ValueError("config backbone is not carn")
    b = _Builder(cfg, body_layer)
    w = cfg.width
    x = b.head()
    outer = [x]
    for g in range(cfg.num_blocks):
        inner = [x]
        h = x
        for r in range(cfg.carn_group_size):
            y = b.unit(f"g{g}.b{r}.conv1", h, w, w, body=True)
            y = b.unit(f"g{g}.b{r}.conv2", b.relu(y), w, w, body=True)
            y = b.relu(b.add(y, h))
            inner.append(y)
            h = b.relu(b.unit(f"g{g}.fuse{r}", b.concat(inner), w * len(inner), w, kernel=1))
        outer.append(h)
        x = b.relu(b.unit(f"fuse{g}", b.concat(outer), w * len(outer), w, kernel=1))
    b.upsampler_and_tail(x)
    return b.net


def build_network(cfg: ModelConfig, body_layer: Callable | None = None) -> Network:
    return (build_srresnet if cfg.backbone == "srresnet" else build_carn)(cfg, body_layer)


# ---------------------------------------------------------------------------
# evaluation

def run_nodes(net: Network, x: ScaleFeatures) -> ScaleFeatures:
    vals: list[ScaleFeatures] = []

    def get(i):
        return x if i == -1 else vals[i]

    for node in net.nodes:
        if node.op == "unit":
            v = node.layer(get(node.inputs[0]))
        elif node.op == "relu":
            src = get(node.inputs[0])
            v = ScaleFeatures([T.relu(g) for g in src], src.levels)
        elif node.op == "add":
            a, c = get(node.inputs[0]), get(node.inputs[1])
            v = ScaleFeatures([T.add(p, q) for p, q in zip(a, c)], a.levels)
        elif node.op == "shuffle":
            src = get(node.inputs[0])
            v = ScaleFeatures([T.pixel_shuffle(g, node.factor) for g in src], src.levels)
        elif node.op == "concat":
            srcs = [get(i) for i in node.inputs]
            v = ScaleFeatures([T.concat([s[k] for s in srcs]) for k in range(len(srcs[0]))], srcs[0].levels)
        else:
            raise ValueError(f"unknown node op {node.op!r}")
        vals.append(v)
    return vals[-1]


def forward_sr(net: Network, lr_image: Tensor) -> Tensor:
    """Map a 3-channel LR batch to its ``upscale``x HR reconstruction."""
    n, c, h, w = lr_image.shape
    if c != 3:
        raise ValueError(f"expected 3 input channels, got {c}")
    m = net.multiple
    if h % m or w % m:
        ph, pw = (-h) % m, (-w) % m
        raise ValueError(f"input {h}x{w} must be divisible by {m}; pad by ({ph}, {pw}) or use reflect padding")
    if lr_image.dtype != net.cfg.np_dtype:
        lr_image = Tensor(lr_image.data.astype(net.cfg.np_dtype), lr_image.requires_grad)
    y = run_nodes(net, ScaleFeatures([lr_image]))
    if net.final_layout is not None:
        order = np.argsort(np.concatenate(net.final_layout))
        return T.take_channels(T.concat(list(y)), order)
    if len(y) != 1:
        return T.concat(list(y))
    return y[0]


def infer_padded(net: Network, lr: np.ndarray) -> np.ndarray:
    """Inference on an arbitrary-size ``(3, H, W)`` image: reflect-pad to the
    required multiple, run, crop back."""
    m = net.multiple
    h, w = lr.shape[1:]
    ph, pw = (-h) % m, (-w) % m
    x = np.pad(lr, ((0, 0), (0, ph), (0, pw)), mode="reflect") if (ph or pw) else lr
    with T.no_grad():
        y = forward_sr(net, Tensor(x[None].astype(net.cfg.np_dtype))).data[0]
    r = net.cfg.upscale
    return y[:, : h * r, : w * r]


def trace_shapes(net: Network, lr_size: tuple[int, int]):
    """Per-node list of per-group ``(C, H, W)`` without running any data.

    Yields ``(node, in_shapes)`` for every unit node.
    """
    h, w = lr_size
    m = net.multiple
    if h < m or w < m or h % m or w % m:
        raise ValueError(f"lr size {lr_size} must be positive multiples of {m}")
    shapes: list[list[tuple[int, int, int]]] = []

    def get(i):
        return [(3, h, w)] if i == -1 else shapes[i]

    units = []
    for node in net.nodes:
        src = get(node.inputs[0])
        if node.op == "unit":
            hw = [(s[1], s[2]) for s in src]
            units.append((node, hw))
            out = node.layer.out_shapes(hw)
            v = [(c, oh, ow) for c, (oh, ow) in zip(node.layer.out_channels, out)]
        elif node.op == "shuffle":
            f = node.factor
            v = [(c // (f * f), a * f, b * f) for c, a, b in src]
        elif node.op == "concat":
            srcs = [get(i) for i in node.inputs]
            v = [(sum(s[k][0] for s in srcs),) + srcs[0][k][1:] for k in range(len(src))]
        else:
            v = src
        shapes.append(v)
    return units


# ---------------------------------------------------------------------------
# unfolding a single-scale network into same-scale branches

def unfold_network(net: Network, parts: int = 2) -> Network:
    """Rewrite every standard convolution of a baseline network as a full
    matrix of same-scale branch convolutions.  The result computes the same
    function."""
    if net.cfg.variant != "baseline":
        raise ValueError("only baseline networks unfold")
    out = Network(net.cfg)
    layouts: list[list[np.ndarray]] = []

    def get(i):
        return [np.arange(3)] if i == -1 else layouts[i]

    for node in net.nodes:
        src = get(node.inputs[0])
        if node.op == "unit":
            p = node.layer.spec.entries[0][0].param
            co = p.weight.shape[0]
            n_out = parts if co % parts == 0 and co > 3 else 1
            out_idx = [np.arange(k * co // n_out, (k + 1) * co // n_out) for k in range(n_out)]
            layer = _unfold_by_index(p, src, out_idx)
            layer.name = node.name
            out.nodes.append(Node(node.name, "unit", node.inputs, layer))
            layouts.append(out_idx)
            continue
        if node.op == "add":
            other = get(node.inputs[1])
            if any(not np.array_equal(a, b) for a, b in zip(src, other)):
                raise ValueError("residual operands have different channel layouts")
            lay = src
        elif node.op == "shuffle":
            r2 = node.factor**2
            lay = []
            for a in src:
                if a[0] % r2 or len(a) % r2 or not np.array_equal(a, np.arange(a[0], a[0] + len(a))):
                    raise ValueError("group not aligned for pixel shuffle")
                lay.append(np.arange(a[0] // r2, (a[0] + len(a)) // r2))
        elif node.op == "concat":
            srcs = [get(i) for i in node.inputs]
            offsets = np.cumsum([0] + [sum(len(a) for a in s) for s in srcs])
            lay = [np.concatenate([s[k] + offsets[t] for t, s in enumerate(srcs)]) for k in range(len(src))]
        else:
            lay = src
        out.nodes.append(Node(node.name, node.op, node.inputs, node.layer, node.factor))
        layouts.append(lay)
    out.final_layout = layouts[-1]
    return out


# ---------------------------------------------------------------------------
# depth search

def deepen_to_target(cfg: ModelConfig, target_flops: int, lr_size: tuple[int, int], max_blocks: int = 512) -> ModelConfig:
    """Largest ``num_blocks`` whose FLOPs at ``lr_size`` do not exceed the target."""
    from .complexity import count_flops

    def flops(nb):
        return count_flops(build_network(replace(cfg, num_blocks=nb)), lr_size)

    if flops(cfg.num_blocks) > target_flops:
        raise ValueError("network already exceeds the target FLOPs")
    lo, hi = cfg.num_blocks, cfg.num_blocks + 1
    while flops(hi) <= target_flops:
        lo, hi = hi, min(2 * hi, max_blocks)
        if lo == max_blocks:
            raise ValueError("target unreachable within max_blocks")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if flops(mid) <= target_flops:
            lo = mid
        else:
            hi = mid
    return replace(cfg, num_blocks=lo)


# ---------------------------------------------------------------------------
# checkpoints: "MSCK", u32 version, u32 blob length, JSON blob, u32 count,
# then (u32 name length, utf-8 name, MSTN tensor) per entry

_CK_MAGIC = b"MSCK"
_CK_VERSION = 1


def save_checkpoint(path, net: Network, extra: dict | None = None, tensors: dict[str, np.ndarray] | None = None) -> None:
    blob = json.dumps({"model": net.cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    table: list[tuple[str, np.ndarray]] = []
    for name, p in net.named_parameters():
        table.append((name + ".weight", p.weight))
        table.append((name + ".bias", p.bias))
    table.extend((tensors or {}).items())
    buf = io.BytesIO()
    buf.write(_CK_MAGIC + struct.pack("<II", _CK_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        T.dump_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, body_layer: Callable | None = None) -> tuple[Network, dict, dict[str, np.ndarray]]:
    f = io.BytesIO(Path(path).read_bytes())
    if f.read(4) != _CK_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, n = struct.unpack("<II", f.read(8))
    if version != _CK_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(f.read(n))
    cfg = ModelConfig.from_dict(meta["model"])
    net = build_network(cfg, body_layer)
    (count,) = struct.unpack("<I", f.read(4))
    table = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", f.read(4))
        name = f.read(ln).decode()
        table[name] = T.load_tensor(f)
    for name, p in net.named_parameters():
        for suffix, arr in ((".weight", p.weight), (".bias", p.bias)):
            src = table.pop(name + suffix)
            arr[...] = src.reshape(arr.shape)
    return net, meta["extra"], table


def n_shared_diagonals(net: Network) -> int:
    """Distinct shared diagonal parameters among the body units."""
    ids = set()
    for name, layer in net.layers():
        if not (name.startswith(("body.", "mid", "g")) and "fuse" not in name):
            continue
        if isinstance(layer, MSConvUnit) and layer.shared:
            ids.add(layer.spec.entries[0][0].param.share_id)
    return len(ids)
