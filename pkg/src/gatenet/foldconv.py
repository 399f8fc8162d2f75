"""Fold/Unfold, folded atrous convolution and the ASPP family.

Fold moves each non-overlapping 2x2 window into the channel axis. Window
positions are stacked top-left, top-right, bottom-left, bottom-right, so
input channel ``c`` at window position ``p`` lands on output channel
``4 * c + p``. Odd heights/widths are zero-padded on the bottom/right
before folding and cropped again by :func:`unfold`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from .tensor import (
    Tensor,
    bilinear_upsample,
    concat_channels,
    conv2d,
    global_avg_pool,
    record_op,
    register_grad_op,
)

ConvKind = Literal["plain_atrous", "folded_atrous"]
Topology = Literal["parallel", "dense"]


@dataclass(frozen=True)
class AsppConfig:
    conv_kind: ConvKind = "folded_atrous"
    topology: Topology = "parallel"
    rates: tuple[int, ...] = (2, 4, 6)
    include_pointwise_branch: bool = True
    include_image_pool_branch: bool = True
    out_channels: int = 32

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        if not self.rates or any(r < 1 for r in self.rates):
            raise ValueError(f"rates must be a non-empty list of ints >= 1, got {self.rates}")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.conv_kind not in ("plain_atrous", "folded_atrous"):
            raise ValueError(f"unknown conv_kind {self.conv_kind!r}")
        if self.topology not in ("parallel", "dense"):
            raise ValueError(f"unknown topology {self.topology!r}")

    def to_dict(self) -> dict:
        return {
            "conv_kind": self.conv_kind,
            "topology": self.topology,
            "rates": list(self.rates),
            "include_pointwise_branch": self.include_pointwise_branch,
            "include_image_pool_branch": self.include_image_pool_branch,
            "out_channels": self.out_channels,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AsppConfig:
        return cls(**{**d, "rates": tuple(d["rates"])})


# Context-module variants compared in the fold ablation.
ABLATION_VARIANTS: dict[str, AsppConfig] = {
    **{
        f"atrous{r}": AsppConfig("plain_atrous", "parallel", (r,), False, False)
        for r in (2, 4, 6)
    },
    **{
        f"fold{r}": AsppConfig("folded_atrous", "parallel", (r,), False, False)
        for r in (2, 4, 6)
    },
    "aspp": AsppConfig("plain_atrous", "parallel"),
    "fold_aspp": AsppConfig("folded_atrous", "parallel"),
    "dense_aspp": AsppConfig("plain_atrous", "dense", include_pointwise_branch=False,
                             include_image_pool_branch=False),
    "fold_dense_aspp": AsppConfig("folded_atrous", "dense", include_pointwise_branch=False,
                                  include_image_pool_branch=False),
}


def fold(x: Tensor) -> Tensor:
    """Space-to-channel transform over 2x2 windows with stride 2."""
    if x.data.ndim != 4:
        raise ValueError(f"fold input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    hh, hw = (h + ph) // 2, (w + pw) // 2

    def forward(xd):
        if ph or pw:
            xd = np.pad(xd, ((0, 0), (0, 0), (0, ph), (0, pw)))
        out = xd.reshape(n, c, hh, 2, hw, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, hh, hw)

        def vjp(g):
            gx = g.reshape(n, c, 2, 2, hh, hw).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * hh, 2 * hw)
            return (gx[:, :, :h, :w],)

        return out, vjp

    return record_op("fold", forward, x)


def unfold(x: Tensor, original_hw: tuple[int, int]) -> Tensor:
    """Inverse of :func:`fold`; crops back to ``original_hw``."""
    if x.data.ndim != 4:
        raise ValueError(f"unfold input must be 4-D, got {x.shape}")
    n, c4, hh, hw = x.shape
    if c4 % 4:
        raise ValueError(f"unfold needs a channel count divisible by 4, got {c4}")
    h, w = original_hw
    if not (2 * hh - 1 <= h <= 2 * hh and 2 * hw - 1 <= w <= 2 * hw):
        raise ValueError(f"original size {h}x{w} does not fold to {hh}x{hw}")
    c = c4 // 4

    def forward(xd):
        out = xd.reshape(n, c, 2, 2, hh, hw).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * hh, 2 * hw)
        out = out[:, :, :h, :w].copy()

        def vjp(g):
            gp = np.zeros((n, c, 2 * hh, 2 * hw))
            gp[:, :, :h, :w] = g
            return (gp.reshape(n, c, hh, 2, hw, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, c4, hh, hw),)

        return out, vjp

    return record_op("unfold", forward, x)


def folded_atrous_conv(x: Tensor, weight: Tensor, bias: Tensor | None, rate: int) -> Tensor:
    """fold -> 3x3 conv with dilation ``rate`` (size-preserving) -> unfold."""
    c = x.shape[1]
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"folded atrous conv expects a 3x3 kernel, got weight {weight.shape}")
    if weight.shape[1] != 4 * c:
        raise ValueError(f"weight inC must be 4*c = {4 * c} for input with c={c}, got {weight.shape[1]}")
    if weight.shape[0] % 4:
        raise ValueError(f"weight outC must be divisible by 4, got {weight.shape[0]}")
    h, w = x.shape[2:]
    y = conv2d(fold(x), weight, bias, stride=1, dilation=rate, padding=rate)
    return unfold(y, (h, w))


register_grad_op("fold", fold)
register_grad_op("unfold", unfold)
register_grad_op("folded_atrous_conv", folded_atrous_conv)


# ---------------------------------------------------------------------------
# ASPP assemblies


def _rate_in_channels(config: AsppConfig, in_channels: int, idx: int) -> int:
    if config.topology == "dense":
        return in_channels + idx * config.out_channels
    return in_channels


def aspp_param_shapes(config: AsppConfig, in_channels: int) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes (without prefix) for one ASPP module."""
    out = config.out_channels
    shapes: dict[str, tuple[int, ...]] = {}
    n_branches = 0
    if config.include_pointwise_branch:
        shapes["pw.w"] = (out, in_channels, 1, 1)
        shapes["pw.b"] = (out,)
        n_branches += 1
    for idx, r in enumerate(config.rates):
        cin = _rate_in_channels(config, in_channels, idx)
        if config.conv_kind == "folded_atrous":
            shapes[f"atrous{idx}.w"] = (4 * out, 4 * cin, 3, 3)
            shapes[f"atrous{idx}.b"] = (4 * out,)
        else:
            shapes[f"atrous{idx}.w"] = (out, cin, 3, 3)
            shapes[f"atrous{idx}.b"] = (out,)
        n_branches += 1
    if config.include_image_pool_branch:
        shapes["pool.w"] = (out, in_channels, 1, 1)
        shapes["pool.b"] = (out,)
        n_branches += 1
    shapes["fuse.w"] = (out, n_branches * out, 1, 1)
    shapes["fuse.b"] = (out,)
    return shapes


def _branch_conv(config: AsppConfig, x: Tensor, w: Tensor, b: Tensor, rate: int) -> Tensor:
    if config.conv_kind == "folded_atrous":
        return folded_atrous_conv(x, w, b, rate)
    return conv2d(x, w, b, dilation=rate, padding=rate)


def aspp_forward(x: Tensor, config: AsppConfig, params: Mapping[str, Tensor]) -> Tensor:
    """Run one ASPP-family module. Output keeps the input's spatial size."""
    expected = aspp_param_shapes(config, x.shape[1])
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ValueError(f"ASPP params do not match branches: missing={missing}, unexpected={extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"ASPP param {name!r} has shape {params[name].shape}, expected {shape}")

    h, w = x.shape[2:]
    branches = []
    if config.include_pointwise_branch:
        branches.append(conv2d(x, params["pw.w"], params["pw.b"]))
    chain = [x]
    for idx, r in enumerate(config.rates):
        inp = concat_channels(chain) if config.topology == "dense" else x
        y = _branch_conv(config, inp, params[f"atrous{idx}.w"], params[f"atrous{idx}.b"], r)
        branches.append(y)
        chain.append(y)
    if config.include_image_pool_branch:
        pooled = conv2d(global_avg_pool(x), params["pool.w"], params["pool.b"])
        branches.append(bilinear_upsample(pooled, h, w))
    return conv2d(concat_channels(branches), params["fuse.w"], params["fuse.b"])


# ---------------------------------------------------------------------------
# receptive field probing


def receptive_field(conv_kind: ConvKind, rate: int, kernel: int, out_pos: tuple[int, int],
                    size: int | None = None) -> set[tuple[int, int]]:
    """Input coordinates that influence the output at ``out_pos``.

    Found by pushing one impulse per input position through a single-channel
    conv with all-ones weights (no cancellation possible) and recording which
    impulses move the probed output. ``size`` is the square probe grid side;
    by default it is large enough that padding never clips the field.
    """
    reach = rate * (kernel - 1) // 2
    if conv_kind == "folded_atrous":
        reach = 2 * reach + 2
    if size is None:
        size = 2 * (reach + max(out_pos) + 2)
        size += size % 2
    oy, ox = out_pos
    impulses = np.zeros((size * size, 1, size, size))
    impulses[np.arange(size * size), 0, np.arange(size * size) // size, np.arange(size * size) % size] = 1.0
    x = Tensor(impulses, copy=False)
    pad = rate * (kernel - 1) // 2
    if conv_kind == "folded_atrous":
        w = Tensor(np.ones((4, 4, kernel, kernel)))
        y = unfold(conv2d(fold(x), w, None, dilation=rate, padding=pad), (size, size))
    elif conv_kind == "plain_atrous":
        w = Tensor(np.ones((1, 1, kernel, kernel)))
        y = conv2d(x, w, None, dilation=rate, padding=pad)
    else:
        raise ValueError(f"unknown conv_kind {conv_kind!r}")
    hits = np.nonzero(y.data[:, 0, oy, ox])[0]
    return {(int(i) // size, int(i) % size) for i in hits}
