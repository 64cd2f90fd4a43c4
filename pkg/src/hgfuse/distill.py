"""Masked self-distillation, the toy detection head and the overall training loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .aha import AhaParams, aha
from .chc import FcmConfig, HyperedgeSet, fcm_refine, pooled_edges
from .encoder import FeaturePyramid
from .numerics import ConfigError, LinearParams, ShapeError, SplitMix64, Tensor, derive_seed

BRANCHES = ("frame", "event")


@dataclass(frozen=True)
class DistillConfig:
    mask_ratio: float = 0.65
    lambda_frame: float = 2e-5
    lambda_event: float = 2e-5
    gen_edges: int = 16
    gen_iters: int = 30
    fuzzifier: float = 2.0
    fcm_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must be in [0, 1), got {self.mask_ratio}")
        if self.lambda_frame < 0 or self.lambda_event < 0:
            raise ConfigError("distillation weights must be non-negative")
        if self.gen_edges < 1 or math.isqrt(self.gen_edges) ** 2 != self.gen_edges:
            raise ConfigError(f"generator hyperedge count must be a perfect square, got {self.gen_edges}")

    @property
    def gen_k(self) -> int:
        return math.isqrt(self.gen_edges)

    @property
    def fcm(self) -> FcmConfig:
        return FcmConfig(self.gen_iters, self.fuzzifier, self.fcm_eps)

    @property
    def enabled(self) -> bool:
        return self.lambda_frame > 0 or self.lambda_event > 0


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


@dataclass
class MaskMap:
    values: Tensor  # [h, w] of {0, 1}
    seed: int

    @property
    def zero_fraction(self) -> float:
        return float(np.mean(self.values.data == 0.0))


def random_mask(h: int, w: int, alpha: float, rng: SplitMix64) -> MaskMap:
    """Cell is 0 where a uniform draw falls below ``alpha``, else 1."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {alpha}")
    seed = rng.state
    with nx.op_scope("mask"):
        nx.tick("random_mask")
        r = rng.uniform((h, w))
    return MaskMap(nx.Tensor(np.where(r < alpha, 0.0, 1.0)), seed)


def step_masks(seed: int, branch: str, step: int, shapes, alpha: float) -> list[MaskMap]:
    """One mask per pyramid level, keyed by (seed, branch, level, step)."""
    out = []
    for level, (_, h, w) in zip((3, 4, 5), shapes):
        out.append(random_mask(h, w, alpha, SplitMix64(derive_seed(seed, "mask", branch, level, step))))
    return out


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def generate(x: Tensor, params: AhaParams, cfg: DistillConfig) -> Tensor:
    """Single-modality hypergraph reconstruction of a [c, h, w] map."""
    if x.ndim != 3:
        raise ShapeError(f"generator expects [c, h, w], got {x.shape}")
    _, h, w = x.shape
    with nx.op_scope("generator"):
        verts = nx.to_tokens(x)
        edges = fcm_refine(HyperedgeSet(pooled_edges(x, cfg.gen_k)), verts, cfg.fcm)
        return nx.from_tokens(aha(verts, edges.edges, params), h, w)


def distill_loss(student: FeaturePyramid, masks: list[MaskMap], teacher: FeaturePyramid,
                 gens: list[AhaParams], cfg: DistillConfig) -> Tensor:
    """Sum over levels of SSE between G_l(student_l * M_l) and the detached teacher."""
    if student.shapes != teacher.shapes:
        raise ShapeError(f"student {student.shapes} and teacher {teacher.shapes} pyramids differ")
    total = None
    for s, m, t, g in zip(student.levels, masks, teacher.levels, gens):
        if m.values.shape != s.shape[1:]:
            raise ShapeError(f"mask {m.values.shape} does not cover map {s.shape}")
        diff = nx.sub(generate(nx.mul(s, m.values), g, cfg), nx.detach(t))
        term = nx.sum(nx.square(diff))
        total = term if total is None else nx.add(total, term)
    return total


# ---------------------------------------------------------------------------
# Toy detection head
# ---------------------------------------------------------------------------

OBJECTNESS_PRIOR = 0.01


@dataclass
class ToyHeadParams:
    lin: LinearParams
    num_classes: int

    @classmethod
    def init(cls, rng: SplitMix64, c: int, num_classes: int) -> ToyHeadParams:
        lin = LinearParams.init(rng, c, 5 + num_classes)
        lin.bias.data[0] = -math.log((1 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR)
        return cls(lin, num_classes)

    def parameters(self) -> list[Tensor]:
        return self.lin.parameters()


@dataclass
class DetectionTargets:
    """Per-cell targets on the finest grid.

    ``offsets`` are (dx, dy, w, h) in cell units / normalised sizes; ``classes``
    is -1 on negative cells.
    """

    objectness: np.ndarray  # [h, w]
    offsets: np.ndarray     # [h, w, 4]
    classes: np.ndarray     # [h, w] int

    @classmethod
    def background(cls, h: int, w: int) -> DetectionTargets:
        return cls(np.zeros((h, w)), np.zeros((h, w, 4)), -np.ones((h, w), dtype=np.int64))


def toy_head(p3: Tensor, params: ToyHeadParams) -> Tensor:
    """[c, h, w] -> [h*w, 5 + classes] raw outputs (objectness logit, 4 offsets, class logits)."""
    return params.lin(nx.to_tokens(p3))


def base_loss(out: Tensor, targets: DetectionTargets, num_classes: int) -> Tensor:
    """Mean BCE on objectness + offset SSE and class CE averaged over positive cells."""
    obj = targets.objectness.reshape(-1)
    if out.shape != (obj.size, 5 + num_classes):
        raise ShapeError(f"head output {out.shape} does not match a {targets.objectness.shape} target grid")
    z = nx.slice_cols(out, 0, 1)
    y = obj.reshape(-1, 1)
    loss = nx.mean(nx.sub(nx.softplus(z), nx.mul(z, y)))
    pos = np.flatnonzero(obj > 0)
    if pos.size == 0:
        return loss
    rows = nx.take_rows(out, pos)
    off_t = targets.offsets.reshape(-1, 4)[pos]
    sse = nx.sum(nx.square(nx.sub(nx.slice_cols(rows, 1, 5), off_t)))
    onehot = np.zeros((pos.size, num_classes))
    onehot[np.arange(pos.size), targets.classes.reshape(-1)[pos]] = 1.0
    ce = nx.neg(nx.sum(nx.mul(nx.log_softmax_rows(nx.slice_cols(rows, 5, 5 + num_classes)), onehot)))
    return nx.add(loss, nx.scale(nx.add(sse, ce), 1.0 / pos.size))


def toy_head_and_base_loss(p: FeaturePyramid, targets: DetectionTargets, params: ToyHeadParams) -> Tensor:
    return base_loss(toy_head(p.f3, params), targets, params.num_classes)


def total_loss(base, d_frame, d_event, lambda_frame: float, lambda_event: float) -> Tensor:
    return nx.add(nx.add(base, nx.scale(nx.as_tensor(d_frame), lambda_frame)),
                  nx.scale(nx.as_tensor(d_event), lambda_event))
