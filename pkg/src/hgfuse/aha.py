"""Hypergraph attention between vertices and hyperedges, plus the activity-driven sparse path."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .events import ActivityMap
from .numerics import ConfigError, LinearParams, ShapeError, SplitMix64, Tensor


@dataclass
class AttnProjections:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams

    @classmethod
    def init(cls, rng: SplitMix64, c: int) -> AttnProjections:
        return cls(*(LinearParams.init(rng.fork(n), c, c, bias=False) for n in "qkvo"))

    @classmethod
    def zeros(cls, c: int) -> AttnProjections:
        return cls(*(LinearParams.zeros(c, c) for _ in range(4)))

    def parameters(self) -> list[Tensor]:
        return [p for lin in (self.q, self.k, self.v, self.o) for p in lin.parameters()]


@dataclass
class AhaParams:
    to_edge: AttnProjections
    to_vertex: AttnProjections
    heads: int = 1

    @classmethod
    def init(cls, rng: SplitMix64, c: int, heads: int) -> AhaParams:
        _check_heads(c, heads)
        return cls(AttnProjections.init(rng.fork("v2e"), c), AttnProjections.init(rng.fork("e2v"), c), heads)

    @classmethod
    def zeros(cls, c: int, heads: int = 1) -> AhaParams:
        return cls(AttnProjections.zeros(c), AttnProjections.zeros(c), heads)

    def parameters(self) -> list[Tensor]:
        return self.to_edge.parameters() + self.to_vertex.parameters()


def _check_heads(c: int, heads: int) -> None:
    if heads < 1 or c % heads:
        raise ConfigError(f"channel count {c} is not divisible by {heads} heads")


def attend(queries: Tensor, keys: Tensor, proj: AttnProjections, heads: int) -> Tensor:
    """queries + [concat_h SM(Q_h K_h^T / sqrt(d_h)) V_h] W_o."""
    c = queries.shape[1]
    if keys.shape[1] != c:
        raise ShapeError(f"query dim {c} != key dim {keys.shape[1]}")
    _check_heads(c, heads)
    dh = c // heads
    q, k, v = proj.q(queries), proj.k(keys), proj.v(keys)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = nx.slice_cols(q, lo, hi) if heads > 1 else q
        kh = nx.slice_cols(k, lo, hi) if heads > 1 else k
        vh = nx.slice_cols(v, lo, hi) if heads > 1 else v
        att = nx.softmax_rows(nx.scale(nx.matmul(qh, nx.transpose(kh)), 1.0 / math.sqrt(dh)))
        outs.append(nx.matmul(att, vh))
        # score product + value product
        nx.count_multiplies(2 * queries.shape[0] * keys.shape[0] * dh)
    mixed = outs[0] if heads == 1 else nx.concat_cols(outs)
    return nx.add(queries, proj.o(mixed))


def vertex_to_edge(x: Tensor, e: Tensor, params: AhaParams) -> Tensor:
    return attend(e, x, params.to_edge, params.heads)


def edge_to_vertex(x: Tensor, e: Tensor, params: AhaParams) -> Tensor:
    return attend(x, e, params.to_vertex, params.heads)


def aha(x: Tensor, e: Tensor, params: AhaParams) -> Tensor:
    return edge_to_vertex(x, vertex_to_edge(x, e, params), params)


def attention_multiplies(n: int, m: int, c: int) -> int:
    """Exact multiply count of one aha() call: two directions, score + value products each."""
    return 4 * n * m * c


def split_modalities(z: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
    if z.shape[0] != 2 * h * w:
        raise ShapeError(f"expected {2 * h * w} rows for a {h}x{w} map pair, got {z.shape[0]}")
    top, bottom = nx.split_rows(z, h * w)
    return nx.from_tokens(top, h, w), nx.from_tokens(bottom, h, w)


@dataclass(frozen=True)
class SparseSelection:
    """Selected spatial tokens (ascending raster indices), shared by both modalities."""

    indices: np.ndarray
    ratio: float
    num_tokens: int

    def __post_init__(self):
        idx = self.indices
        if len(idx) < 1 or len(np.unique(idx)) != len(idx) or idx.min() < 0 or idx.max() >= self.num_tokens:
            raise ShapeError(f"invalid token selection {idx.tolist()} for {self.num_tokens} tokens")

    @property
    def vertex_rows(self) -> np.ndarray:
        return np.concatenate([self.indices, self.indices + self.num_tokens])


def selection_size(rho: float, hw: int) -> int:
    # guard against 0.1 * 30 = 3.0000000000000004 style round-up
    return max(1, min(hw, math.ceil(rho * hw - 1e-9)))


def select_sparse_tokens(am: ActivityMap, rho: float, h: int | None = None, w: int | None = None) -> SparseSelection:
    """Top ceil(rho*hw) tokens by event count; ties go to the lower raster index."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    grid = am.grid.data
    if h is not None and grid.shape != (h, w):
        raise ShapeError(f"activity grid {grid.shape} does not match token grid {(h, w)}")
    flat = grid.reshape(-1)
    hw = flat.size
    order = np.lexsort((np.arange(hw), -flat))
    keep = np.sort(order[: selection_size(rho, hw)])
    return SparseSelection(keep.astype(np.int64), float(rho), hw)


def sparse_aha(x: Tensor, e: Tensor, params: AhaParams, sel: SparseSelection) -> Tensor:
    """aha() on the selected rows of both modality blocks; other rows pass through unchanged."""
    if x.shape[0] != 2 * sel.num_tokens:
        raise ShapeError(f"selection over {sel.num_tokens} tokens does not fit {x.shape[0]} vertices")
    rows = sel.vertex_rows
    return nx.put_rows(x, rows, aha(nx.take_rows(x, rows), e, params))
