"""Patch-embedding encoder producing a three-level feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

from . import numerics as nx
from .numerics import ConfigError, LinearParams, SplitMix64, Tensor

SCALE_FACTORS = (1, 2, 4)  # relative to the base stride: levels 3, 4, 5


@dataclass
class FeaturePyramid:
    f3: Tensor
    f4: Tensor
    f5: Tensor

    @property
    def levels(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.f3, self.f4, self.f5

    @property
    def shapes(self):
        return tuple(t.shape for t in self.levels)

    def replace(self, **kw) -> FeaturePyramid:
        d = {"f3": self.f3, "f4": self.f4, "f5": self.f5}
        d.update(kw)
        return FeaturePyramid(**d)


@dataclass
class EncoderParams:
    in_channels: int
    channels: int
    stride_base: int
    stages: list[tuple[LinearParams, LinearParams]]

    @classmethod
    def init(cls, rng: SplitMix64, in_channels: int, channels: int, stride_base: int = 8) -> EncoderParams:
        stages = []
        for level, f in zip((3, 4, 5), SCALE_FACTORS):
            s = stride_base * f
            r = rng.fork("level", level)
            stages.append((LinearParams.init(r.fork("embed"), in_channels * s * s, channels),
                           LinearParams.init(r.fork("mix"), channels, channels)))
        return cls(in_channels, channels, stride_base, stages)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(self.stride_base * f for f in SCALE_FACTORS)

    def parameters(self) -> list[Tensor]:
        return [p for a, b in self.stages for p in a.parameters() + b.parameters()]


def encode(image: Tensor, params: EncoderParams) -> FeaturePyramid:
    """Per level: s x s patch flatten -> linear -> ReLU -> linear, reshaped to [c, H/s, W/s]."""
    ch, hh, ww = image.shape
    if ch != params.in_channels:
        raise ConfigError(f"encoder expects {params.in_channels} input channels, got {ch}")
    coarsest = params.strides[-1]
    if hh % coarsest or ww % coarsest:
        raise ConfigError(f"input {hh}x{ww} is not divisible by stride {coarsest}")
    maps = []
    for s, (embed, mix) in zip(params.strides, params.stages):
        tokens = mix(nx.relu(embed(nx.patchify(image, s))))
        maps.append(nx.from_tokens(tokens, hh // s, ww // s))
    return FeaturePyramid(*maps)
