"""Multi-scale convolution as a matrix of per-scale transformations.

A unit maps input groups ``X_j`` to output groups ``Y_i = sum_j f_ij(X_j)``.
Group ``i`` lives at spatial level ``levels[i]`` (resolution divided by
``2**level``); an entry that crosses levels composes one factor-2 resampling
step per level of difference around a single convolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

VARIANTS = (
    "standard",
    "unet",
    "octave",
    "multigrid",
    "ms",
    "ms2",
    "ms2_no_lh",
    "ms2_no_hl",
    "ms3",
    "ms3_large",
)

# entry kinds
ZERO = "zero"
IDENTITY = "identity"
CONV = "conv"
CONV_UP = "conv_up"  # convolve, then nearest-upsample
UP_CONV = "up_conv"  # nearest-upsample, then convolve
DOWN_CONV = "down_conv"  # pool, then convolve
KINDS = (ZERO, IDENTITY, CONV, CONV_UP, UP_CONV, DOWN_CONV)

_DOWN = {"avg": T.avg_pool2, "max": T.max_pool2, "nearest": T.nearest_subsample2}


@dataclass
class ScaleFeatures:
    """Feature groups of one sample batch, finest first."""

    groups: list[Tensor]
    levels: tuple[int, ...] | None = None

    def __post_init__(self):
        self.groups = list(self.groups)
        if self.levels is None:
            self.levels = tuple(range(len(self.groups)))
        self.levels = tuple(self.levels)
        if len(self.levels) != len(self.groups) or not self.groups:
            raise ValueError("one level per group required")
        n, _, h, w = self.groups[0].shape
        l0 = self.levels[0]
        for g, lv in zip(self.groups, self.levels):
            f = 2 ** (lv - l0)
            if g.shape[0] != n or g.dtype != self.groups[0].dtype:
                raise ValueError("groups disagree on batch size or dtype")
            if g.shape[2] * f != h or g.shape[3] * f != w:
                raise ValueError(f"group at level {lv} has spatial {g.shape[2:]}, expected {(h // f, w // f)}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(g.shape[1] for g in self.groups)

    def __len__(self):
        return len(self.groups)

    def __getitem__(self, i) -> Tensor:
        return self.groups[i]

    def __iter__(self):
        return iter(self.groups)


@dataclass
class TransformEntry:
    kind: str = ZERO
    param: Parameter | None = None
    dilation: int = 1
    steps: int = 0
    down: str = "avg"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown entry kind {self.kind!r}")
        if self.kind in (ZERO, IDENTITY) and self.param is not None:
            raise ValueError(f"{self.kind} entries carry no parameters")
        if self.kind not in (ZERO, IDENTITY) and self.param is None:
            raise ValueError(f"{self.kind} entry needs a parameter")
        if self.kind in (CONV_UP, UP_CONV, DOWN_CONV) and self.steps < 1:
            raise ValueError(f"{self.kind} needs at least one resampling step")
        if self.kind in (CONV, IDENTITY) and self.steps:
            raise ValueError(f"{self.kind} cannot change level")

    @property
    def kernel(self) -> int:
        return self.param.kernel if self.param is not None else 0

    def level_shift(self) -> int:
        """Output level minus input level."""
        if self.kind in (CONV_UP, UP_CONV):
            return -self.steps
        if self.kind == DOWN_CONV:
            return self.steps
        return 0

    def _conv(self, x: Tensor) -> Tensor:
        k = self.param.kernel
        return T.conv2d(x, self.param, dilation=self.dilation, padding=self.dilation * (k - 1) // 2)

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == IDENTITY:
            return x
        if self.kind == CONV:
            return self._conv(x)
        if self.kind == CONV_UP:
            y = self._conv(x)
            for _ in range(self.steps):
                y = T.nearest_upsample2(y)
            return y
        if self.kind == UP_CONV:
            for _ in range(self.steps):
                x = T.nearest_upsample2(x)
            return self._conv(x)
        if self.kind == DOWN_CONV:
            for _ in range(self.steps):
                x = _DOWN[self.down](x)
            return self._conv(x)
        raise ValueError("zero entries are not evaluated")

    def flops(self, in_hw: tuple[int, int]) -> int:
        """Multiply-adds per sample for an input of spatial size ``in_hw``."""
        if self.kind in (ZERO, IDENTITY):
            return 0
        h, w = in_hw
        if self.kind == UP_CONV:
            h, w = h * 2**self.steps, w * 2**self.steps
        elif self.kind == DOWN_CONV:
            h, w = h // 2**self.steps, w // 2**self.steps
        co, ci, k, _ = self.param.weight.shape
        return T.conv_flops(co, ci, k, h, w)


@dataclass
class TransformSpec:
    """``entries[i][j]`` maps input group ``j`` to output group ``i``."""

    entries: list[list[TransformEntry]]
    in_channels: tuple[int, ...]
    out_channels: tuple[int, ...]
    in_levels: tuple[int, ...] | None = None
    out_levels: tuple[int, ...] | None = None

    def __post_init__(self):
        self.in_channels = tuple(self.in_channels)
        self.out_channels = tuple(self.out_channels)
        if self.in_levels is None:
            self.in_levels = tuple(range(len(self.in_channels)))
        if self.out_levels is None:
            self.out_levels = tuple(range(len(self.out_channels)))
        s_out, s_in = len(self.out_channels), len(self.in_channels)
        if len(self.entries) != s_out or any(len(row) != s_in for row in self.entries):
            raise ValueError(f"entry matrix must be {s_out}x{s_in}")
        for i, row in enumerate(self.entries):
            for j, e in enumerate(row):
                if e.kind == ZERO:
                    continue
                if e.level_shift() != self.out_levels[i] - self.in_levels[j]:
                    raise ValueError(f"entry ({i},{j}) {e.kind} does not connect level {self.in_levels[j]} to {self.out_levels[i]}")
                if e.kind == IDENTITY:
                    if self.in_channels[j] != self.out_channels[i]:
                        raise ValueError(f"identity entry ({i},{j}) changes width")
                    continue
                co, ci = e.param.weight.shape[:2]
                if (co, ci) != (self.out_channels[i], self.in_channels[j]):
                    raise ValueError(f"entry ({i},{j}) maps {ci}->{co}, expected {self.in_channels[j]}->{self.out_channels[i]}")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.out_channels), len(self.in_channels)


@dataclass
class MSConvUnit:
    spec: TransformSpec
    shared: bool = False
    name: str = ""

    def __post_init__(self):
        if self.shared:
            diag = [self.spec.entries[i][i] for i in range(min(self.spec.shape)) if self.spec.entries[i][i].param is not None]
            ids = {e.param.share_id for e in diag}
            sigs = {(e.kernel, e.dilation) for e in diag}
            if len(ids) != 1 or len(sigs) != 1:
                raise ValueError("shared unit needs one diagonal parameter with one (k, dilation) signature")

    @property
    def in_channels(self):
        return self.spec.in_channels

    @property
    def out_channels(self):
        return self.spec.out_channels

    def parameters(self) -> list[Parameter]:
        return [e.param for row in self.spec.entries for e in row if e.param is not None]

    def __call__(self, x: ScaleFeatures) -> ScaleFeatures:
        return forward(self, x)

    def flop_rows(self, in_shapes: Sequence[tuple[int, int]]) -> list[tuple[int, int, list[Parameter]]]:
        """(output scale, multiply-adds, parameters) per output group."""
        rows = []
        for i, row in enumerate(self.spec.entries):
            fl = sum(e.flops(in_shapes[j]) for j, e in enumerate(row))
            rows.append((i, fl, [e.param for e in row if e.param is not None]))
        return rows

    def out_shapes(self, in_shapes):
        h0, w0 = in_shapes[0]
        l0 = self.spec.in_levels[0]
        base = (h0 * 2**l0, w0 * 2**l0)
        return [(base[0] // 2**lv, base[1] // 2**lv) for lv in self.spec.out_levels]


def forward(unit: MSConvUnit, x: ScaleFeatures) -> ScaleFeatures:
    """Evaluate ``Y_i = sum_j entries[i][j](X_j)``."""
    spec = unit.spec
    if x.channels != spec.in_channels:
        raise ValueError(f"unit expects channels {spec.in_channels}, got {x.channels}")
    if tuple(lv - x.levels[0] for lv in x.levels) != tuple(lv - spec.in_levels[0] for lv in spec.in_levels):
        raise ValueError(f"unit expects levels {spec.in_levels}, got {x.levels}")
    shift = x.levels[0] - spec.in_levels[0]
    n, _, h, w = x[0].shape
    base = (h * 2 ** spec.in_levels[0], w * 2 ** spec.in_levels[0])
    out = []
    for i, row in enumerate(spec.entries):
        acc = None
        for j, e in enumerate(row):
            if e.kind == ZERO:
                continue
            y = e(x[j])
            acc = y if acc is None else T.add(acc, y)
        if acc is None:
            f = 2 ** spec.out_levels[i]
            acc = T.zeros((n, spec.out_channels[i], base[0] // f, base[1] // f), dtype=x[0].dtype)
        out.append(acc)
    return ScaleFeatures(out, tuple(lv + shift for lv in spec.out_levels))


# ---------------------------------------------------------------------------
# builders

def split_widths(total: int, s: int) -> tuple[int, ...]:
    """Equal split with the remainder on scale 0."""
    base = total // s
    return (total - base * (s - 1),) + (base,) * (s - 1)


def _conv_entry(c_out, c_in, k, rng, dtype, kind=CONV, steps=0, down="avg", param=None):
    p = param if param is not None else Parameter.init(c_out, c_in, k, rng, dtype)
    return TransformEntry(kind, p, steps=steps, down=down)


def _cross_entry(i, j, c_out, c_in, k, rng, dtype, low_to_high=CONV_UP, down="avg"):
    if i < j:  # coarser input, finer output
        return _conv_entry(c_out, c_in, k, rng, dtype, low_to_high, steps=j - i)
    return _conv_entry(c_out, c_in, k, rng, dtype, DOWN_CONV, steps=i - j, down=down)


def _widths(channels, s):
    ch = tuple(channels) if not isinstance(channels, int) else split_widths(channels, s)
    if len(ch) != s:
        raise ValueError(f"need {s} channel widths, got {ch}")
    return ch


def _shared_diag(cin, cout, k, rng, dtype):
    """One kernel sized for the widest scale; narrower scales use its leading block."""
    root = Parameter.init(max(cout), max(cin), k, rng, dtype)
    params = []
    for ci, co in zip(cin, cout):
        params.append(root.alias() if (co, ci) == root.weight.shape[:2] else root.sub(co, ci))
    return params


def build_variant(
    name: str,
    s: int,
    channels,
    out_channels=None,
    kernel: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> MSConvUnit:
    """Instantiate one of the named transformation matrices.

    ``channels`` are per-scale input widths (or a total to split equally);
    ``out_channels`` default to the input widths.
    """
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    cin = _widths(channels, s)
    cout = cin if out_channels is None else _widths(out_channels, s)
    k = kernel
    Z = TransformEntry

    if name == "standard":
        if s != 1:
            raise ValueError("standard convolution has a single scale")
        return MSConvUnit(TransformSpec([[_conv_entry(cout[0], cin[0], k, rng, dtype)]], cin, cout))
    if name == "ms":
        rows = [[_conv_entry(cout[i], cin[j], k, rng, dtype) if i == j else Z() for j in range(s)] for i in range(s)]
        return MSConvUnit(TransformSpec(rows, cin, cout))
    if name == "ms3" and s != 2:
        return build_multibranch_ms3(s, cin, cout, kernel=k, rng=rng, dtype=dtype)
    if name == "multigrid":
        if s != 3:
            raise ValueError("multigrid requires exactly 3 scales")
        rows = []
        for i in range(3):
            row = []
            for j in range(3):
                if i == j:
                    row.append(_conv_entry(cout[i], cin[j], k, rng, dtype))
                elif abs(i - j) == 1:
                    row.append(_cross_entry(i, j, cout[i], cin[j], k, rng, dtype, low_to_high=UP_CONV, down="max"))
                else:
                    row.append(Z())
            rows.append(row)
        return MSConvUnit(TransformSpec(rows, cin, cout))
    if s != 2:
        raise ValueError(f"variant {name!r} is defined for 2 scales, got {s}")

    if name == "unet":
        if cin[0] != cout[0]:
            raise ValueError("unet keeps the fine scale as identity; widths must match")
        rows = [[Z(IDENTITY), Z()], [Z(), _conv_entry(cout[1], cin[1], k, rng, dtype)]]
        return MSConvUnit(TransformSpec(rows, cin, cout))

    shared = name in ("ms3", "ms3_large")
    if shared:
        d0, d1 = _shared_diag(cin, cout, k, rng, dtype)
        hh, ll = TransformEntry(CONV, d0), TransformEntry(CONV, d1)
    else:
        hh, ll = _conv_entry(cout[0], cin[0], k, rng, dtype), _conv_entry(cout[1], cin[1], k, rng, dtype)
    kx = 1 if name == "ms3" else k
    lh = _cross_entry(0, 1, cout[0], cin[1], kx, rng, dtype)
    hl = _cross_entry(1, 0, cout[1], cin[0], kx, rng, dtype)
    if name == "ms2_no_lh":
        lh = Z()
    elif name == "ms2_no_hl":
        hl = Z()
    return MSConvUnit(TransformSpec([[hh, lh], [hl, ll]], cin, cout), shared=shared)


def build_multibranch_ms3(
    s: int,
    channels,
    out_channels=None,
    kernel: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> MSConvUnit:
    """MS3 with every pair of scales connected by a 1x1 path."""
    if not 1 <= s <= 4:
        raise ValueError("multi-branch MS3 supports 1 to 4 scales")
    rng = rng if rng is not None else np.random.default_rng(0)
    cin = _widths(channels, s)
    cout = cin if out_channels is None else _widths(out_channels, s)
    diag = _shared_diag(cin, cout, kernel, rng, dtype)
    rows = []
    for i in range(s):
        row = []
        for j in range(s):
            if i == j:
                row.append(TransformEntry(CONV, diag[i]))
            else:
                row.append(_cross_entry(i, j, cout[i], cin[j], 1, rng, dtype))
        rows.append(row)
    return MSConvUnit(TransformSpec(rows, cin, cout), shared=True)


def unfold_standard(w: Parameter, split: Sequence[int], out_split: Sequence[int] | None = None) -> MSConvUnit:
    """Cut one convolution into a full matrix of same-scale convolutions.

    Entry ``(i, j)`` holds the weight block ``w[out_i, in_j]``; the bias goes
    to the first input column so it is added once per output group.
    """
    out_split = tuple(split) if out_split is None else tuple(out_split)
    co, ci = w.weight.shape[:2]
    if sum(split) != ci or sum(out_split) != co:
        raise ValueError(f"partition {tuple(split)}->{out_split} does not match weight {w.weight.shape}")
    return _unfold_by_index(w, _ranges(split), _ranges(out_split))


def _ranges(sizes):
    b = np.cumsum([0, *sizes])
    return [np.arange(b[i], b[i + 1]) for i in range(len(sizes))]


def _unfold_by_index(w: Parameter, in_idx, out_idx) -> MSConvUnit:
    rows = []
    for i, oi in enumerate(out_idx):
        row = []
        for j, ij in enumerate(in_idx):
            wt = w.weight[np.ix_(oi, ij)].copy()
            b = w.bias[oi].copy() if j == 0 else np.zeros(len(oi), dtype=w.bias.dtype)
            row.append(TransformEntry(CONV, Parameter(wt, b)))
        rows.append(row)
    s_in, s_out = len(in_idx), len(out_idx)
    spec = TransformSpec(
        rows,
        tuple(len(a) for a in in_idx),
        tuple(len(a) for a in out_idx),
        in_levels=(0,) * s_in,
        out_levels=(0,) * s_out,
    )
    return MSConvUnit(spec)


def split_channels(x: Tensor, split: Sequence[int]) -> ScaleFeatures:
    """Partition channels into same-scale groups."""
    if sum(split) != x.shape[1]:
        raise ValueError("partition does not cover the channels")
    return ScaleFeatures([T.take_channels(x, slice(a[0], a[-1] + 1)) for a in _ranges(split)], (0,) * len(split))


def concat_groups(y: ScaleFeatures) -> Tensor:
    return T.concat(list(y))


# ---------------------------------------------------------------------------
# FirstConv / LastConv

def build_first_conv(
    c_in: int,
    widths: Sequence[int],
    kernel: int = 3,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> MSConvUnit:
    """Single full-scale input to ``len(widths)`` scales; scale i average-pools
    i times before its convolution."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for i, c in enumerate(widths):
        if i == 0:
            rows.append([_conv_entry(c, c_in, kernel, rng, dtype)])
        else:
            rows.append([_conv_entry(c, c_in, kernel, rng, dtype, DOWN_CONV, steps=i)])
    return MSConvUnit(TransformSpec(rows, (c_in,), tuple(widths), in_levels=(0,)))


def build_last_conv(
    widths: Sequence[int],
    c_out: int,
    kernel: int = 3,
    upsample_first: bool = True,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> MSConvUnit:
    """``len(widths)`` scales to one full-scale output, summed.

    With ``upsample_first`` coarse groups are brought to full resolution
    before their convolution; otherwise they are convolved and then upsampled.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    kind = UP_CONV if upsample_first else CONV_UP
    row = []
    for j, c in enumerate(widths):
        if j == 0:
            row.append(_conv_entry(c_out, c, kernel, rng, dtype))
        else:
            row.append(_conv_entry(c_out, c, kernel, rng, dtype, kind, steps=j))
    return MSConvUnit(TransformSpec([row], tuple(widths), (c_out,), out_levels=(0,)))


def split_to_scales(first: MSConvUnit, x: Tensor) -> ScaleFeatures:
    return forward(first, ScaleFeatures([x]))


def aggregate_to_single(last: MSConvUnit, y: ScaleFeatures) -> Tensor:
    return forward(last, y)[0]
