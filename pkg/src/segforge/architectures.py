"""Declarative layer tables for ENet and BoxENet, the UNet builder, and
parameter counting.

The encoder/decoder table is data: a list of rows that serializes to
the same text a reader would transcribe from the comparison table, and
compiles into an executable network. BoxENet differs from ENet only in
the rows where a dilated or regular bottleneck is swapped for a
box-convolution bottleneck.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from segforge import tensor as tz
from segforge.layers import (
    BatchNorm2d,
    BoxConv2d,
    Conv2d,
    ConvTranspose2d,
    Layer,
    PReLU,
    SeedStream,
    SpatialDropout2d,
)
from segforge.ops import max_unpool2d, maxpool2d
from segforge.tensor import ContractError, Tensor, concat_channels

__all__ = [
    "LayerRow",
    "enet_spec",
    "boxenet_spec",
    "bold_row_indices",
    "render_spec",
    "build",
    "build_enet",
    "build_boxenet",
    "build_unet",
    "count_parameters",
    "NetworkModel",
]

DOWNSAMPLER = "downsampler"
BOTTLENECK = "bottleneck"
BOTTLENECK_DOWN = "bottleneck_downsample"
BOTTLENECK_BOX = "bottleneck_boxconv"
UPSAMPLER = "upsampler"
FINAL_TRANSPOSED = "final_transposed"


@dataclass(frozen=True)
class LayerRow:
    kind: str
    in_ch: int
    out_ch: int
    dilation: int = 1

    def render(self):
        i, o = self.in_ch, self.out_ch
        if self.kind == DOWNSAMPLER:
            return f"Downsampler({i}->{o})"
        if self.kind == BOTTLENECK_DOWN:
            return f"Bottleneck({i}->{o}, downsample)"
        if self.kind == BOTTLENECK:
            if self.dilation > 1:
                return f"Bottleneck({i}->{o}, dilation={self.dilation})"
            return f"Bottleneck({i}->{o})"
        if self.kind == BOTTLENECK_BOX:
            return f"BottleneckBoxConv({i}->{o})"
        if self.kind == UPSAMPLER:
            return f"Upsampler({i}->{o})"
        if self.kind == FINAL_TRANSPOSED:
            return f"ConvTranspose2d({i}->{o})"
        raise ValueError(f"unknown row kind {self.kind!r}")


def enet_spec():
    """All 29 encoder/decoder rows, dilations running 2,4,8,16 twice."""
    rows = [
        LayerRow(DOWNSAMPLER, 3, 16),
        LayerRow(BOTTLENECK_DOWN, 16, 64),
        LayerRow(BOTTLENECK, 64, 64),
        LayerRow(BOTTLENECK, 64, 64),
        LayerRow(BOTTLENECK, 64, 64),
        LayerRow(BOTTLENECK, 64, 64),
        LayerRow(BOTTLENECK_DOWN, 64, 128),
        LayerRow(BOTTLENECK, 128, 128),
    ]
    for dilation in (2, 4, 8, 16, 2, 4, 8, 16):
        rows.append(LayerRow(BOTTLENECK, 128, 128, dilation=dilation))
        rows.append(LayerRow(BOTTLENECK, 128, 128))
    # The decoder follows the final dilation=16 row directly; the loop's
    # trailing plain bottleneck does not exist in the table.
    rows = rows[:-1]
    rows += [
        LayerRow(UPSAMPLER, 128, 64),
        LayerRow(BOTTLENECK, 64, 64),
        LayerRow(BOTTLENECK, 64, 64),
        LayerRow(UPSAMPLER, 64, 16),
        LayerRow(BOTTLENECK, 16, 16),
        LayerRow(FINAL_TRANSPOSED, 16, 2),
    ]
    return rows


def bold_row_indices():
    """Rows the box variant replaces: two at width 64, the eight dilated ones."""
    rows = enet_spec()
    out = [3, 5]
    out += [i for i, r in enumerate(rows) if r.dilation > 1]
    return tuple(sorted(out))


def boxenet_spec():
    rows = list(enet_spec())
    for i in bold_row_indices():
        r = rows[i]
        rows[i] = LayerRow(BOTTLENECK_BOX, r.in_ch, r.out_ch)
    return rows


def render_spec(rows):
    return "\n".join(r.render() for r in rows) + "\n"


# -- blocks --------------------------------------------------------------


def _zero_pad_channels(x, out_ch, dtype):
    extra = out_ch - x.shape[1]
    if extra == 0:
        return x
    pad = tz.zeros((x.shape[0], extra, x.shape[2], x.shape[3]), dtype=dtype)
    return concat_channels(x, pad)


class EnetDownsampler(Layer):
    """Initial block: stride-2 3x3 conv and 2x2 max pool, channel-concatenated.

    Falls back to a plain stride-2 conv when the width multiplier leaves
    no room for the pooled branch (out_ch - in_ch < 1).
    """

    def __init__(self, in_ch, out_ch, seeds, dtype):
        conv_ch = out_ch - in_ch
        self.pool_branch = conv_ch >= 1
        conv_out = conv_ch if self.pool_branch else out_ch
        self.conv = Conv2d(in_ch, conv_out, 3, stride=2, padding=1, bias=False, seed=seeds.next("init_conv"), dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.act = PReLU(out_ch, dtype=dtype)

    def forward(self, x, stack):
        main = self.conv(x)
        if self.pool_branch:
            pooled, _ = maxpool2d(x)
            main = concat_channels(main, pooled)
        return self.act(self.bn(main))


class EnetBottleneck(Layer):
    """Residual unit: 1x1 reduce, core transform, 1x1 expand, dropout,
    merged with the skip branch and passed through PReLU.

    Kinds: plain/dilated conv core, stride-2 conv core with a
    pool-and-pad skip (pushes its pool indices), or a box-convolution
    core.
    """

    def __init__(self, in_ch, out_ch, kind, dilation, p_drop, seeds, dtype, box_radius=None):
        mid = max(in_ch // 4, 1)
        self.kind = kind
        self.out_ch = out_ch
        self.dtype = dtype
        self.reduce = Conv2d(in_ch, mid, 1, bias=False, seed=seeds.next("reduce"), dtype=dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        self.act1 = PReLU(mid, dtype=dtype)
        if kind == BOTTLENECK_BOX:
            self.core = BoxConv2d(mid, radius=box_radius, seed=seeds.next("box"))
        elif kind == BOTTLENECK_DOWN:
            self.core = Conv2d(mid, mid, 3, stride=2, padding=1, bias=False, seed=seeds.next("core"), dtype=dtype)
        else:
            self.core = Conv2d(mid, mid, 3, padding=dilation, dilation=dilation, bias=False, seed=seeds.next("core"), dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.act2 = PReLU(mid, dtype=dtype)
        self.expand = Conv2d(mid, out_ch, 1, bias=False, seed=seeds.next("expand"), dtype=dtype)
        self.bn3 = BatchNorm2d(out_ch, dtype=dtype)
        self.drop = SpatialDropout2d(p_drop, seed=seeds.next("drop"))
        self.act_out = PReLU(out_ch, dtype=dtype)

    def forward(self, x, stack):
        main = self.act1(self.bn1(self.reduce(x)))
        main = self.act2(self.bn2(self.core(main)))
        main = self.drop(self.bn3(self.expand(main)))
        if self.kind == BOTTLENECK_DOWN:
            pooled, indices = maxpool2d(x)
            stack.append(indices)
            skip = _zero_pad_channels(pooled, self.out_ch, self.dtype)
        else:
            skip = x
        return self.act_out(main + skip)


class EnetUpsampler(Layer):
    """Decoder bottleneck: transposed-conv core; the skip projects to the
    output width and max-unpools with indices popped from the paired
    downsample block (first in, last out)."""

    def __init__(self, in_ch, out_ch, p_drop, seeds, dtype):
        mid = max(in_ch // 4, 1)
        self.reduce = Conv2d(in_ch, mid, 1, bias=False, seed=seeds.next("reduce"), dtype=dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        self.act1 = PReLU(mid, dtype=dtype)
        self.core = ConvTranspose2d(mid, mid, 2, stride=2, bias=False, seed=seeds.next("core"), dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.act2 = PReLU(mid, dtype=dtype)
        self.expand = Conv2d(mid, out_ch, 1, bias=False, seed=seeds.next("expand"), dtype=dtype)
        self.bn3 = BatchNorm2d(out_ch, dtype=dtype)
        self.drop = SpatialDropout2d(p_drop, seed=seeds.next("drop"))
        self.skip_conv = Conv2d(in_ch, out_ch, 1, bias=False, seed=seeds.next("skip"), dtype=dtype)
        self.skip_bn = BatchNorm2d(out_ch, dtype=dtype)
        self.act_out = PReLU(out_ch, dtype=dtype)

    def forward(self, x, stack):
        if not stack:
            raise ContractError("upsampler has no paired downsample pool indices")
        indices = stack.pop()
        main = self.act1(self.bn1(self.reduce(x)))
        main = self.act2(self.bn2(self.core(main)))
        main = self.drop(self.bn3(self.expand(main)))
        skip = max_unpool2d(self.skip_bn(self.skip_conv(x)), indices)
        return self.act_out(main + skip)


class _FinalTransposed(Layer):
    def __init__(self, in_ch, out_ch, seeds, dtype):
        self.conv = ConvTranspose2d(in_ch, out_ch, 2, stride=2, bias=True, seed=seeds.next("final"), dtype=dtype)

    def forward(self, x, stack):
        return self.conv(x)


# -- networks ------------------------------------------------------------


class NetworkModel(Layer):
    """Executable network with a stable parameter registry and mode flag."""

    def __init__(self):
        self.mode = "eval"

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {mode!r}")
        self.mode = mode
        super().set_mode(mode)

    def parameters(self):
        return self.named_parameters()

    @property
    def spec_hash(self):
        text = f"{self.arch_text}|width_mult={self.width_mult}|dtype={np.dtype(self.dtype).name}"
        return hashlib.sha256(text.encode()).hexdigest()


def _scaled(ch, width_mult):
    return max(int(round(ch * width_mult)), 1)


class EncoderDecoderNet(NetworkModel):
    def __init__(self, rows, width_mult=1.0, seed=0, dropout=(0.01, 0.1), dtype=np.float32, input_size=256):
        super().__init__()
        self.arch_text = render_spec(rows)
        self.width_mult = width_mult
        self.dtype = dtype
        self.hyper = {
            "width_mult": width_mult,
            "dropout": list(dropout),
            "bn_momentum": 0.1,
            "bn_eps": 1e-5,
            "seed": seed,
            "input_size": input_size,
        }
        seeds = SeedStream(seed)
        p_early, p_late = dropout
        factor = 1
        downsamples_seen = 0
        blocks = []
        for row in rows:
            in_s = row.in_ch if row.kind == DOWNSAMPLER else _scaled(row.in_ch, width_mult)
            out_s = row.out_ch if row.kind == FINAL_TRANSPOSED else _scaled(row.out_ch, width_mult)
            p = p_early if downsamples_seen < 2 else p_late
            if row.kind == DOWNSAMPLER:
                blocks.append(EnetDownsampler(in_s, out_s, seeds, dtype))
                factor *= 2
            elif row.kind == BOTTLENECK_DOWN:
                downsamples_seen += 1
                p = p_early if downsamples_seen < 2 else p_late
                blocks.append(EnetBottleneck(in_s, out_s, row.kind, 1, p, seeds, dtype))
                factor *= 2
            elif row.kind == BOTTLENECK:
                blocks.append(EnetBottleneck(in_s, out_s, row.kind, row.dilation, p, seeds, dtype))
            elif row.kind == BOTTLENECK_BOX:
                radius = max(input_size // factor, 2)
                blocks.append(
                    EnetBottleneck(in_s, out_s, row.kind, 1, p, seeds, dtype, box_radius=float(radius))
                )
            elif row.kind == UPSAMPLER:
                blocks.append(EnetUpsampler(in_s, out_s, p, seeds, dtype))
                factor //= 2
            elif row.kind == FINAL_TRANSPOSED:
                blocks.append(_FinalTransposed(in_s, out_s, seeds, dtype))
            else:
                raise ValueError(f"unknown row kind {row.kind!r}")
        self.blocks = blocks

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected (N, 3, H, W) input, got {x.shape}")
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ContractError(f"spatial extents must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")
        stack = []
        for block in self.blocks:
            x = block(x, stack)
        return x


class _UnetDoubleConv(Layer):
    def __init__(self, in_ch, out_ch, seeds, dtype):
        self.conv1 = Conv2d(in_ch, out_ch, 3, padding=1, bias=False, seed=seeds.next("c1"), dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, padding=1, bias=False, seed=seeds.next("c2"), dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        x = tz.relu(self.bn1(self.conv1(x)))
        return tz.relu(self.bn2(self.conv2(x)))


class UNet(NetworkModel):
    """Four-level hourglass with skip concatenation and same-padding convs."""

    def __init__(self, width_mult=1.0, base_width=64, seed=0, dtype=np.float32):
        super().__init__()
        widths = [_scaled(base_width * (2**i), width_mult) for i in range(5)]
        self.arch_text = "UNet(base={})\n".format(_scaled(base_width, width_mult))
        self.width_mult = width_mult
        self.dtype = dtype
        self.hyper = {
            "width_mult": width_mult,
            "base_width": base_width,
            "bn_momentum": 0.1,
            "bn_eps": 1e-5,
            "seed": seed,
        }
        seeds = SeedStream(seed)
        enc_in = [3] + widths[:3]
        self.encoders = [_UnetDoubleConv(i, o, seeds, dtype) for i, o in zip(enc_in, widths[:4])]
        self.bridge = _UnetDoubleConv(widths[3], widths[4], seeds, dtype)
        self.upconvs = [
            ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2, bias=False, seed=seeds.next("up"), dtype=dtype)
            for i in reversed(range(4))
        ]
        self.decoders = [
            _UnetDoubleConv(2 * widths[i], widths[i], seeds, dtype) for i in reversed(range(4))
        ]
        self.head = Conv2d(widths[0], 2, 1, bias=True, seed=seeds.next("head"), dtype=dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected (N, 3, H, W) input, got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise ContractError(f"spatial extents must be divisible by 16, got {x.shape[2]}x{x.shape[3]}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x, _ = maxpool2d(x)
        x = self.bridge(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = dec(concat_channels(skip, up(x)))
        return self.head(x)


def build(rows, width_mult=1.0, seed=0, dropout=(0.01, 0.1), dtype=np.float32, input_size=256):
    return EncoderDecoderNet(rows, width_mult, seed, dropout, dtype, input_size)


def build_enet(width_mult=1.0, seed=0, dropout=(0.01, 0.1), dtype=np.float32, input_size=256):
    return build(enet_spec(), width_mult, seed, dropout, dtype, input_size)


def build_boxenet(width_mult=1.0, seed=0, dropout=(0.01, 0.1), dtype=np.float32, input_size=256):
    return build(boxenet_spec(), width_mult, seed, dropout, dtype, input_size)


def build_unet(width_mult=1.0, base_width=64, seed=0, dtype=np.float32):
    return UNet(width_mult=width_mult, base_width=base_width, seed=seed, dtype=dtype)


def count_parameters(model):
    """Total learnable element count plus a per-top-level-child breakdown."""
    params = model.named_parameters()
    total = sum(t.size for t in params.values())
    breakdown = OrderedDict()
    for name, t in params.items():
        top = name.split(".")[0]
        breakdown[top] = breakdown.get(top, 0) + t.size
    return total, breakdown
