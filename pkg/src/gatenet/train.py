"""Synthetic rectangle data and the toy training loop behind ``train-toy``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .net import AdamState, Batch, ModelConfig, ModelParams, init_params, train_step

log = logging.getLogger(__name__)


def synthetic_rectangles(count: int = 4, size: int = 64, seed: int = 0, depth: bool = False) -> Batch:
    """Noisy images each holding one axis-aligned rectangle, plus their masks.

    Foreground and background colours are drawn per image from disjoint
    brightness ranges so the task is learnable from colour alone.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, size, size))
    masks = np.zeros((count, 1, size, size))
    for i in range(count):
        rh, rw = rng.integers(size // 4, size * 5 // 8, size=2)
        top = rng.integers(0, size - rh + 1)
        left = rng.integers(0, size - rw + 1)
        masks[i, 0, top:top + rh, left:left + rw] = 1.0
        bg = rng.uniform(0.0, 0.35, size=3)
        fg = rng.uniform(0.65, 1.0, size=3)
        m = masks[i, 0]
        images[i] = bg[:, None, None] * (1 - m) + fg[:, None, None] * m
    images += rng.normal(0.0, 0.05, size=images.shape)
    depth_maps = None
    if depth:
        depth_maps = 0.2 + 0.6 * masks + rng.normal(0.0, 0.05, size=masks.shape)
    return Batch(np.clip(images, 0.0, 1.0), masks, None if depth_maps is None else np.clip(depth_maps, 0.0, 1.0))


@dataclass
class ToyRun:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    mae: list[float] = field(default_factory=list)
    first_grad_norms: dict[str, float] = field(default_factory=dict)


def train_toy(config: ModelConfig, steps: int, seed: int, lr: float = 1e-4,
              batch: Batch | None = None, log_every: int = 0) -> ToyRun:
    """Full-batch Adam on the synthetic set; returns the trained params and history.

    ``mae`` holds the training MAE of the final prediction measured in each
    step's forward pass (i.e. before that step's update).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    size = config.input_size[0]
    if batch is None:
        batch = synthetic_rectangles(4, size, seed, depth=config.stream == "two")
    params = init_params(config, seed)
    state = AdamState.create(params)
    run = ToyRun(params)
    for step in range(1, steps + 1):
        result = train_step(config, params, batch, state, lr)
        params, state = result.params, result.state
        run.losses.append(result.loss)
        run.mae.append(float(np.abs(result.prediction.sf.data - batch.masks).mean()))
        if step == 1:
            run.first_grad_norms = result.grad_norms
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6f mae %.6f", step, result.loss, run.mae[-1])
    run.params = params
    return run
