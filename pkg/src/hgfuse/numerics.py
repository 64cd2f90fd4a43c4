"""Small reverse-mode tensor engine over float64 numpy arrays.

Every differentiable primitive used by the rest of the package lives here.
Ops record onto the active :class:`Tape` (if any input requires a gradient)
and :func:`backward` replays the tape in reverse creation order.
"""

from __future__ import annotations

import builtins
import contextlib
import contextvars
import hashlib
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Dense row-major float64 array with optional tape linkage."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive ops. Use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("hgfuse_tape", default=None)


@contextlib.contextmanager
def no_grad():
    token = _TAPE.set(None)
    try:
        yield
    finally:
        _TAPE.reset(token)


# ---------------------------------------------------------------------------
# Op counters
# ---------------------------------------------------------------------------


@dataclass
class OpCounter:
    """Per-scope primitive op counts plus attention multiply counts."""

    ops: Counter = field(default_factory=Counter)
    attention_multiplies: int = 0

    def scope_total(self, prefix: str) -> int:
        return builtins.sum(n for (scope, _), n in self.ops.items() if scope.startswith(prefix))

    def total(self) -> int:
        return builtins.sum(self.ops.values())

    def ops_within(self, name: str) -> int:
        """Ops recorded under any scope path that contains ``name`` as a component."""
        return builtins.sum(n for (scope, _), n in self.ops.items() if name in scope.split("/"))

    def by_scope(self) -> dict[str, int]:
        out: Counter = Counter()
        for (scope, _), n in self.ops.items():
            out[scope] += n
        return dict(sorted(out.items()))


_COUNTER: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar("hgfuse_counter", default=None)
_SCOPE: contextvars.ContextVar[str] = contextvars.ContextVar("hgfuse_scope", default="")


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


@contextlib.contextmanager
def op_scope(name: str):
    parent = _SCOPE.get()
    token = _SCOPE.set(f"{parent}/{name}" if parent else name)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def tick(op: str, n: int = 1) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.ops[(_SCOPE.get(), op)] += n


def count_multiplies(n: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.attention_multiplies += int(n)


# ---------------------------------------------------------------------------
# Op plumbing
# ---------------------------------------------------------------------------


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    tick(op)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = _TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(op, out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result("scale", a.data * s, (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _result("power", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result("log", out, (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); the gradient is zero where the floor is active."""
    on = a.data > lo
    return _result("clamp_min", np.where(on, a.data, lo), (a,), lambda g: (g * on,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * ad))
    return _result("softplus", out, (a,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# Reductions and row-wise ops
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted per row."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax_rows", out, (x,), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax_rows", out, (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra and layout
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _result("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_rows: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result("concat_rows", np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {a.shape}")

    def backward(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _result("slice_rows", a.data[start:stop].copy(), (a,), backward)


def split_rows(a: Tensor, n1: int) -> tuple[Tensor, Tensor]:
    return slice_rows(a, 0, n1), slice_rows(a, n1, a.shape[0])


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result("concat_cols", np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for {a.shape}")

    def backward(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _result("slice_cols", np.ascontiguousarray(a.data[:, start:stop]), (a,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result("take_rows", a.data[idx], (a,), backward)


def put_rows(a: Tensor, idx, b: Tensor) -> Tensor:
    """Copy of ``a`` with rows ``idx`` replaced by the rows of ``b``. ``idx`` must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    if b.shape != (len(idx),) + a.shape[1:]:
        raise ShapeError(f"put_rows: {b.shape} does not fit {len(idx)} rows of {a.shape}")
    out = a.data.copy()
    out[idx] = b.data

    def backward(g):
        ga = g.copy()
        ga[idx] = 0.0
        return ga, g[idx]

    return _result("put_rows", out, (a, b), backward)


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data)


# ---------------------------------------------------------------------------
# Spatial ops on [c, h, w] maps
# ---------------------------------------------------------------------------


def _pool_matrix(n: int, k: int) -> np.ndarray:
    mat = np.zeros((k, n))
    for i in range(k):
        lo = (i * n) // k
        hi = -((-(i + 1) * n) // k)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


def adaptive_avg_pool(x: Tensor, k: int) -> Tensor:
    """Average ``x`` [c, h, w] onto a k x k grid.

    Cell (i, j) covers rows [floor(i*h/k), ceil((i+1)*h/k)) and the matching
    column window, so k > h is allowed and simply repeats input cells.
    """
    if k <= 0:
        raise ConfigError(f"pool size must be positive, got {k}")
    if x.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool expects [c, h, w], got {x.shape}")
    _, h, w = x.shape
    ph, pw = _pool_matrix(h, k), _pool_matrix(w, k)
    out = np.matmul(np.matmul(ph, x.data), pw.T)

    def backward(g):
        return (np.matmul(np.matmul(ph.T, g), pw),)

    return _result("adaptive_avg_pool", out, (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of [c, h, w]."""
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _result("upsample2x", out, (x,),
                   lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


def patchify(x: Tensor, s: int) -> Tensor:
    """[ch, H, W] -> [(H/s)*(W/s), ch*s*s], raster order over patches."""
    ch, hh, ww = x.shape
    if hh % s or ww % s:
        raise ConfigError(f"patch size {s} does not divide {hh}x{ww}")
    hp, wp = hh // s, ww // s
    out = x.data.reshape(ch, hp, s, wp, s).transpose(1, 3, 0, 2, 4).reshape(hp * wp, ch * s * s)

    def backward(g):
        return (g.reshape(hp, wp, ch, s, s).transpose(2, 0, 3, 1, 4).reshape(ch, hh, ww),)

    return _result("patchify", np.ascontiguousarray(out), (x,), backward)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """D[i, j] = ||a_i - b_j||^2 for a [m, c], b [n, c]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = np.einsum("ijc,ijc->ij", diff, diff)

    def backward(g):
        gd = 2.0 * g[:, :, None] * diff
        return gd.sum(axis=1), -gd.sum(axis=0)

    return _result("pairwise_sq_dist", out, (a, b), backward)


def to_tokens(x: Tensor) -> Tensor:
    """[c, h, w] -> [h*w, c] in raster order."""
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    """[h*w, c] -> [c, h, w]; inverse of :func:`to_tokens`."""
    n, c = x.shape
    if n != h * w:
        raise ShapeError(f"from_tokens: {n} rows cannot fill a {h}x{w} map")
    return reshape(transpose(x), (c, h, w))


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf tensor that requires one.

    Returns a dict keyed by the leaf tensors themselves, in first-reached order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None or loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].out is not loss:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for p, gp in zip(node.parents, node.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + gp if key in grads else gp
            if p.node_id is None or p.node_id >= len(tape.nodes) or tape.nodes[p.node_id].out is not p:
                leaves[key] = p
    return {leaf: grads[key] for key, leaf in leaves.items()}


def grad_or_zero(grads: dict[Tensor, np.ndarray], p: Tensor) -> np.ndarray:
    g = grads.get(p)
    return np.zeros_like(p.data) if g is None else g


# ---------------------------------------------------------------------------
# Linear layer
# ---------------------------------------------------------------------------


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def init(cls, rng: SplitMix64, in_dim: int, out_dim: int, bias: bool = True) -> LinearParams:
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"linear dims must be positive, got {in_dim}x{out_dim}")
        bound = 1.0 / math.sqrt(in_dim)
        w = parameter(rng.uniform((in_dim, out_dim), -bound, bound))
        # nonzero bias keeps ReLU inputs off the kink when the input is all zeros
        b = parameter(rng.uniform((out_dim,), -bound, bound)) if bias else None
        return cls(w, b)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, bias: bool = False) -> LinearParams:
        return cls(parameter(np.zeros((in_dim, out_dim))), parameter(np.zeros(out_dim)) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y if self.bias is None else add(y, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit seed for a named sub-stream."""
    digest = hashlib.blake2b(repr((int(seed),) + tuple(keys)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SplitMix64:
    """Counter-based splitmix64 generator, vectorised with numpy uint64 arithmetic."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def fork(self, *keys) -> SplitMix64:
        return SplitMix64(derive_seed(self.state, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK64
        return z

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor absorbs round-off on near-zero gradients."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckEntry:
    label: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def worst(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.rel_error <= self.tolerance for e in self.entries)

    def worst_by_label(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.label] = max(out.get(e.label, 0.0), e.rel_error)
        return out


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-5,
    indices: Iterable[tuple[int, int]] | None = None,
    labels: Sequence[str] | None = None,
    floor: float = 1e-6,
    corrupt: Callable[[list[np.ndarray]], list[np.ndarray]] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and must read ``params`` (whose ``.data`` is
    perturbed in place and restored). ``indices`` selects (param, flat index)
    pairs; by default every entry is checked. The step for entry p is
    ``step * max(1, |p|)``.
    """
    with no_grad():
        f0, f1 = f().data.copy(), f().data.copy()
    if not np.array_equal(f0, f1):
        raise ContractError("function is not deterministic: two evaluations differ")

    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape)
    analytic = [grad_or_zero(grads, p).reshape(-1).copy() for p in params]
    if corrupt is not None:
        analytic = corrupt(analytic)

    if indices is None:
        indices = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    labels = labels or [f"param{i}" for i in range(len(params))]

    entries = []
    for pi, j in indices:
        flat = params[pi].data.reshape(-1)
        orig = flat[j]
        h = step * max(1.0, abs(orig))
        try:
            flat[j] = orig + h
            with no_grad():
                fp = float(f().data)
            flat[j] = orig - h
            with no_grad():
                fm = float(f().data)
        finally:
            flat[j] = orig
        num = (fp - fm) / (2.0 * h)
        a = float(analytic[pi][j])
        entries.append(GradCheckEntry(labels[pi], int(j), a, num, relative_error(a, num, floor)))
    return GradCheckReport(entries, tolerance)


# ---------------------------------------------------------------------------
# Tensor dump format
# ---------------------------------------------------------------------------

_MAGIC = b"HFT1"


def dumps_tensor(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = _MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def loads_tensor(buf: bytes) -> Tensor:
    if buf[:4] != _MAGIC:
        raise ValueError("not a tensor dump: bad magic")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{ndim}I", buf, 8)
    offset = 8 + 4 * ndim
    n = math.prod(shape)
    if len(buf) != offset + 8 * n:
        raise ValueError(f"tensor dump payload has {len(buf) - offset} bytes, expected {8 * n}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64)
    return Tensor(data.reshape(shape))


def save_tensor(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())
