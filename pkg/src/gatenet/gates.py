"""Gate units: per-level scalar pairs that weight encoder features.

Each gate unit convolves its context features down to two channels, squashes
them with a sigmoid and averages over space, giving one ``(g1, g2)`` pair per
sample: ``g1`` weights the level's transition feature in the top-down (FPN)
branch and ``g2`` weights it in the parallel branch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    global_avg_pool,
    resize_bilinear,
    scale_channels,
    sigmoid,
    slice_channels,
)

AGGREGATE_CHANNELS = 32
AGGREGATE_LEVEL = 3  # 1-based level whose resolution the aggregate uses


@dataclass
class GateTrace:
    """Gate scalars recorded during one forward pass.

    ``fpn`` and ``parallel`` are (n, 5) arrays, column ``i`` holding level
    ``i + 1``. ``cross`` is (n, 5, 2) with (g_rgb, g_depth) for two-stream
    models and ``None`` otherwise.
    """

    fpn: np.ndarray
    parallel: np.ndarray
    cross: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {"fpn": self.fpn.tolist(), "parallel": self.parallel.tolist()}
        if self.cross is not None:
            d["cross"] = self.cross.tolist()
        return d


def _resize_to(x: Tensor, hw: tuple[int, int]) -> Tensor:
    return resize_bilinear(x, *hw)


def aggregate_encoder(features: Sequence[Tensor], params: Mapping[str, Tensor]) -> Tensor:
    """E = Conv(Cat(E1..E5)) at level-3 resolution.

    Every level is bilinearly resized to the level-3 grid before concatenation.
    ``params`` holds ``"w"`` (32, sum of level widths, 3, 3) and ``"b"``.
    """
    if len(features) != 5:
        raise ValueError(f"aggregate_encoder needs 5 encoder levels, got {len(features)}")
    hw = features[AGGREGATE_LEVEL - 1].shape[2:]
    stacked = concat_channels([_resize_to(f, hw) for f in features])
    return conv2d(stacked, params["w"], params["b"], padding=1)


def gate_values(context: Tensor, partner: Tensor, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Return the (g1, g2) gates, each of shape (n, 1, 1, 1).

    ``partner`` (the deeper decoder feature, or T5 at the top level) is
    resized to the context grid, concatenated with it and passed through a
    2-channel 3x3 conv, a sigmoid and global average pooling. Which tensor
    serves as context decides the unit version: the level's own encoder
    feature (v1) or the all-level aggregate from :func:`aggregate_encoder` (v2).
    """
    w, b = params["w"], params["b"]
    if w.shape[0] != 2:
        raise ValueError(f"gate conv must have 2 output channels, got {w.shape[0]}")
    partner = _resize_to(partner, context.shape[2:])
    if partner.shape[2:] != context.shape[2:]:
        raise ValueError(f"gate inputs disagree spatially: {context.shape} vs {partner.shape}")
    g = global_avg_pool(sigmoid(conv2d(concat_channels([context, partner]), w, b, padding=1)))
    return slice_channels(g, 0, 1), slice_channels(g, 1, 2)


def cross_modal_gate(e_rgb: Tensor, e_depth: Tensor, params: Mapping[str, Tensor],
                     context: Tensor | None = None) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Fuse one encoder level of the two modalities through a gate pair.

    The gate conv sees ``Cat(e_rgb, e_depth)`` unless an explicit ``context``
    is passed. The fused map is ``g_rgb * Conv(e_rgb) + g_depth * Conv(e_depth)``
    and keeps the RGB level's channel width.
    """
    if e_rgb.shape[2:] != e_depth.shape[2:] or e_rgb.shape[0] != e_depth.shape[0]:
        raise ValueError(f"modalities disagree in resolution: {e_rgb.shape} vs {e_depth.shape}")
    gate_in = concat_channels([e_rgb, e_depth]) if context is None else context
    if params["gate.w"].shape[0] != 2:
        raise ValueError("cross-modal gate conv must have 2 output channels")
    g = global_avg_pool(sigmoid(conv2d(gate_in, params["gate.w"], params["gate.b"], padding=1)))
    g_rgb, g_depth = slice_channels(g, 0, 1), slice_channels(g, 1, 2)
    rgb = conv2d(e_rgb, params["rgb.w"], params["rgb.b"], padding=1)
    depth = conv2d(e_depth, params["depth.w"], params["depth.b"], padding=1)
    fused = add(scale_channels(rgb, g_rgb), scale_channels(depth, g_depth))
    return fused, (g_rgb, g_depth)
