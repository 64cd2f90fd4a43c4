"""Model configuration and its ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from .chc import FcmConfig
from .distill import DistillConfig
from .numerics import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    frame_channels: int = 1
    stride_base: int = 8
    channels: int = 32
    k: int = 2
    heads: int = 4
    fcm_iters_train: int = 30
    fcm_iters_infer: int = 5
    fuzzifier: float = 2.0
    fcm_eps: float = 1e-8
    sparse: bool = True
    rho: float = 0.5
    mask_ratio: float = 0.65
    lambda_frame: float = 2e-5
    lambda_event: float = 2e-5
    gen_edges: int = 4
    gen_iters: int = 30
    num_classes: int = 2
    seed: int = 0
    learning_rate: float = 1e-2
    train_samples: int = 8
    event_threshold: float = 0.2

    def __post_init__(self):
        coarsest = 4 * self.stride_base
        if self.stride_base < 1 or self.image_size < coarsest or self.image_size % coarsest:
            raise ConfigError(f"image_size {self.image_size} must be a positive multiple of {coarsest}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.channels < 1 or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if self.num_classes < 1 or self.frame_channels < 1 or self.train_samples < 1:
            raise ConfigError("num_classes, frame_channels and train_samples must be positive")
        if self.event_threshold <= 0 or self.learning_rate <= 0:
            raise ConfigError("event_threshold and learning_rate must be positive")
        # sub-configs validate themselves on construction
        _ = (self.fcm_train, self.fcm_infer, self.distill)

    @property
    def fcm_train(self) -> FcmConfig:
        return FcmConfig(self.fcm_iters_train, self.fuzzifier, self.fcm_eps)

    @property
    def fcm_infer(self) -> FcmConfig:
        return FcmConfig(self.fcm_iters_infer, self.fuzzifier, self.fcm_eps)

    @property
    def distill(self) -> DistillConfig:
        return DistillConfig(self.mask_ratio, self.lambda_frame, self.lambda_event,
                             self.gen_edges, self.gen_iters, self.fuzzifier, self.fcm_eps)

    @property
    def num_hyperedges(self) -> int:
        return 2 * self.k * self.k

    @property
    def strides(self) -> tuple[int, int, int]:
        return self.stride_base, 2 * self.stride_base, 4 * self.stride_base

    def replace(self, **kw) -> ModelConfig:
        return dataclasses.replace(self, **kw)


def _parse_value(key: str, typ: type, raw: str):
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        val = typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None
    if typ is float and not math.isfinite(val):
        raise ConfigError(f"{key}: value must be finite")
    return val


_TYPES = {"int": int, "float": float, "bool": bool}


def parse_config(text: str) -> ModelConfig:
    types = {f.name: _TYPES[f.type] for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, types[key], raw)
    return ModelConfig(**values)


def serialize_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, cfg: ModelConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
