"""Cross-modal hyperedge construction: pooled initial hyperedges refined by fuzzy C-means."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, ShapeError, Tensor


@dataclass
class HyperedgeSet:
    edges: Tensor  # [m, c]
    provenance: list[str] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.edges.shape[0]


@dataclass
class VertexSet:
    """[2hw, c] vertices: frame pixels in raster order, then event pixels."""

    vertices: Tensor
    h: int
    w: int

    @property
    def n(self) -> int:
        return self.vertices.shape[0]


@dataclass(frozen=True)
class FcmConfig:
    iters: int = 30
    fuzzifier: float = 2.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.iters < 0:
            raise ConfigError(f"FCM iteration count must be >= 0, got {self.iters}")
        if self.fuzzifier <= 1.0:
            raise ConfigError(f"fuzzifier must exceed 1, got {self.fuzzifier}")
        if self.eps <= 0.0:
            raise ConfigError(f"distance floor must be positive, got {self.eps}")


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"frame/event maps must share a [c, h, w] shape, got {a.shape} and {b.shape}")


def pooled_edges(x: Tensor, k: int) -> Tensor:
    """k*k hyperedge rows of dimension c from one [c, h, w] map."""
    return nx.to_tokens(nx.adaptive_avg_pool(x, k))


def build_initial_hyperedges(f5: Tensor, s5: Tensor, k: int) -> HyperedgeSet:
    _check_pair(f5, s5)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    edges = nx.concat_rows([pooled_edges(f5, k), pooled_edges(s5, k)])
    prov = [f"{mod}:{i // k},{i % k}" for mod in ("frame", "event") for i in range(k * k)]
    return HyperedgeSet(edges, prov)


def concat_vertices(f5: Tensor, s5: Tensor) -> VertexSet:
    _check_pair(f5, s5)
    _, h, w = f5.shape
    return VertexSet(nx.concat_rows([nx.to_tokens(f5), nx.to_tokens(s5)]), h, w)


def memberships(edges: Tensor, verts: Tensor, cfg: FcmConfig) -> Tensor:
    """[m, n] fuzzy memberships; each column sums to one.

    u_ij = d_ij^-p / sum_l d_lj^-p with p = 2/(f-1), evaluated as a softmax of
    -p*log(d) over the edges so tiny floored distances stay finite.
    """
    p = 2.0 / (cfg.fuzzifier - 1.0)
    d2 = nx.clamp_min(nx.pairwise_sq_dist(edges, verts), cfg.eps * cfg.eps)
    logits = nx.scale(nx.log(d2), -0.5 * p)
    return nx.transpose(nx.softmax_rows(nx.transpose(logits)))


def fcm_step(edges: Tensor, verts: Tensor, cfg: FcmConfig) -> tuple[Tensor, Tensor]:
    """One FCM iteration; returns (memberships for ``edges``, updated edges)."""
    u = memberships(edges, verts, cfg)
    wts = nx.power(u, cfg.fuzzifier)
    new = nx.div(nx.matmul(wts, verts), nx.sum(wts, axis=1, keepdims=True))
    return u, new


def fcm_refine(init: HyperedgeSet, verts: VertexSet | Tensor, cfg: FcmConfig) -> HyperedgeSet:
    """Run ``cfg.iters`` unrolled FCM iterations starting from ``init``. Differentiable."""
    x = verts.vertices if isinstance(verts, VertexSet) else verts
    if x.shape[1] != init.edges.shape[1]:
        raise ShapeError(f"edge dim {init.edges.shape[1]} != vertex dim {x.shape[1]}")
    if init.m > x.shape[0]:
        warnings.warn(f"{init.m} hyperedges for only {x.shape[0]} vertices", stacklevel=2)
    if cfg.iters == 0:
        return init
    e = init.edges
    for _ in range(cfg.iters):
        _, e = fcm_step(e, x, cfg)
    return HyperedgeSet(e, ["refined"] * init.m)


def fcm_trace(init: np.ndarray, verts: np.ndarray, cfg: FcmConfig):
    """Centroids, memberships and objective after every iteration (no tape).

    ``objective[t]`` is sum_ij u_ij^f d_ij^2 for the centroids entering
    iteration t and their optimal memberships.
    """
    e = nx.Tensor(init)
    x = nx.Tensor(verts)
    cents, membs, objs = [], [], []
    with nx.no_grad():
        for _ in range(cfg.iters):
            u, e_next = fcm_step(e, x, cfg)
            d2 = np.maximum(nx.pairwise_sq_dist(e, x).data, cfg.eps * cfg.eps)
            objs.append(float(np.sum(u.data ** cfg.fuzzifier * d2)))
            membs.append(u.data)
            cents.append(e_next.data)
            e = e_next
    return cents, membs, objs
