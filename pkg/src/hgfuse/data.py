"""Procedural moving-square frames with synthesized events and detection targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distill import DetectionTargets
from .events import EventStream, synth_events
from .numerics import SplitMix64, Tensor, derive_seed

SPEED = 2          # pixels per frame
SIZE_RANGE = (8, 16)
SQUARE_LEVEL = 0.9
BACKGROUND = (0.1, 0.3)
WINDOW_US = (0, 10_000)
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass
class Sample:
    frame: Tensor          # [1, H, W], the later of the two frames
    events: EventStream    # between the two frames
    targets: DetectionTargets
    box: tuple[float, float, float, float]  # cx, cy, w, h in pixels


def render(background: np.ndarray, x0: int, y0: int, size: int) -> Tensor:
    img = background.copy()
    img[y0:y0 + size, x0:x0 + size] = SQUARE_LEVEL
    return Tensor(img[None])


def square_targets(cx: float, cy: float, size: int, image_size: int, stride: int,
                   num_classes: int) -> DetectionTargets:
    g = image_size // stride
    t = DetectionTargets.background(g, g)
    i, j = min(int(cy // stride), g - 1), min(int(cx // stride), g - 1)
    t.objectness[i, j] = 1.0
    t.offsets[i, j] = (cx / stride - j, cy / stride - i, size / 16.0, size / 16.0)
    lo, hi = SIZE_RANGE
    t.classes[i, j] = min(num_classes - 1, (size - lo) * num_classes // (hi - lo + 1))
    return t


def make_sample(seed: int, index: int, image_size: int, stride: int, threshold: float,
                num_classes: int) -> Sample:
    rng = SplitMix64(derive_seed(seed, "sample", index))
    size = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
    dx, dy = DIRECTIONS[int(rng.integers(0, len(DIRECTIONS)))]
    margin = SPEED
    x0 = int(rng.integers(margin, image_size - size - margin + 1))
    y0 = int(rng.integers(margin, image_size - size - margin + 1))
    bg = rng.uniform((image_size, image_size), *BACKGROUND)
    a = render(bg, x0, y0, size)
    x1, y1 = x0 + SPEED * dx, y0 + SPEED * dy
    b = render(bg, x1, y1, size)
    events = synth_events(a, b, threshold, *WINDOW_US)
    cx, cy = x1 + size / 2.0, y1 + size / 2.0
    return Sample(b, events, square_targets(cx, cy, size, image_size, stride, num_classes),
                  (cx, cy, float(size), float(size)))


def moving_squares(cfg, count: int | None = None, offset: int = 0) -> list[Sample]:
    """Deterministic dataset for a :class:`~hgfuse.config.ModelConfig`."""
    n = cfg.train_samples if count is None else count
    return [make_sample(cfg.seed, offset + i, cfg.image_size, cfg.stride_base, cfg.event_threshold,
                        cfg.num_classes) for i in range(n)]
