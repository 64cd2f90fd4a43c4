"""Additive fusion of two pyramids followed by a minimal path-aggregation FPN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoder import FeaturePyramid
from .numerics import ConfigError, LinearParams, ShapeError, SplitMix64, Tensor, parameter


def fuse_add(f: FeaturePyramid, s: FeaturePyramid) -> FeaturePyramid:
    if f.shapes != s.shapes:
        raise ShapeError(f"pyramid shapes differ: {f.shapes} vs {s.shapes}")
    return FeaturePyramid(*(nx.add(a, b) for a, b in zip(f.levels, s.levels)))


def pointwise(x: Tensor, lin: LinearParams) -> Tensor:
    """Per-position linear + ReLU on a [c, h, w] map."""
    _, h, w = x.shape
    return nx.from_tokens(nx.relu(lin(nx.to_tokens(x))), h, w)


def downsample2x(x: Tensor) -> Tensor:
    _, h, w = x.shape
    if h % 2 or w % 2 or h != w:
        raise ConfigError(f"2x average pooling needs an even square map, got {h}x{w}")
    return nx.adaptive_avg_pool(x, h // 2)


@dataclass
class PafpnParams:
    lateral: list[LinearParams]  # applied to inputs p3, p4, p5
    merge: list[LinearParams]    # applied to top-down maps T3, T4, T5

    @classmethod
    def init(cls, rng: SplitMix64, c: int) -> PafpnParams:
        return cls([LinearParams.init(rng.fork("lat", i), c, c) for i in (3, 4, 5)],
                   [LinearParams.init(rng.fork("merge", i), c, c) for i in (3, 4, 5)])

    @classmethod
    def identity(cls, c: int) -> PafpnParams:
        def eye():
            return LinearParams(parameter(np.eye(c)), parameter(np.zeros(c)))
        return cls([eye() for _ in range(3)], [eye() for _ in range(3)])

    def parameters(self) -> list[Tensor]:
        return [p for lin in self.lateral + self.merge for p in lin.parameters()]


def pafpn(p: FeaturePyramid, params: PafpnParams) -> FeaturePyramid:
    """Top-down pass with nearest upsampling, then bottom-up with 2x2 average pooling."""
    (_, h3, _), (_, h4, _), (_, h5, _) = p.shapes
    if h3 != 2 * h4 or h4 != 2 * h5:
        raise ConfigError(f"pyramid levels must halve in size, got {p.shapes}")
    lat3, lat4, lat5 = params.lateral
    td3, td4, td5 = params.merge

    t5 = pointwise(p.f5, lat5)
    t4 = nx.add(pointwise(p.f4, lat4), nx.upsample2x(t5))
    t3 = nx.add(pointwise(p.f3, lat3), nx.upsample2x(t4))

    o3 = pointwise(t3, td3)
    o4 = nx.add(pointwise(t4, td4), downsample2x(o3))
    o5 = nx.add(pointwise(t5, td5), downsample2x(o4))
    return FeaturePyramid(o3, o4, o5)
