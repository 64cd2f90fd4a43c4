"""End-to-end pipeline: encoders, scale-5 hypergraph interaction, PAFPN, head and losses."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .aha import AhaParams, aha, select_sparse_tokens, sparse_aha, split_modalities
from .chc import build_initial_hyperedges, concat_vertices, fcm_refine
from .config import ModelConfig
from .data import Sample, make_sample, moving_squares
from .distill import (BRANCHES, DetectionTargets, ToyHeadParams, base_loss, distill_loss, step_masks,
                      toy_head, total_loss)
from .encoder import EncoderParams, FeaturePyramid, encode
from .events import ActivityMap, EventStream, activity_map, events_to_frame, window_of
from .fusion import PafpnParams, fuse_add, pafpn
from .numerics import ConfigError, ShapeError, SplitMix64, Tape, Tensor, derive_seed

EVAL_STEP = -1  # mask key used for post-training feature-alignment measurement


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"training diverged at step {step}: {msg}")
        self.step = step


@dataclass
class ModelParams:
    frame_encoder: EncoderParams
    event_encoder: EncoderParams
    aha: AhaParams
    pafpn: PafpnParams
    head: ToyHeadParams
    gen_frame: list[AhaParams]
    gen_event: list[AhaParams]

    @classmethod
    def init(cls, cfg: ModelConfig) -> ModelParams:
        root = SplitMix64(derive_seed(cfg.seed, "params"))
        c = cfg.channels
        return cls(
            EncoderParams.init(root.fork("frame_encoder"), cfg.frame_channels, c, cfg.stride_base),
            EncoderParams.init(root.fork("event_encoder"), 2, c, cfg.stride_base),
            AhaParams.init(root.fork("aha"), c, cfg.heads),
            PafpnParams.init(root.fork("pafpn"), c),
            ToyHeadParams.init(root.fork("head"), c, cfg.num_classes),
            [AhaParams.init(root.fork("gen_frame", lvl), c, cfg.heads) for lvl in (3, 4, 5)],
            [AhaParams.init(root.fork("gen_event", lvl), c, cfg.heads) for lvl in (3, 4, 5)],
        )

    def groups(self) -> list[tuple[str, list[Tensor]]]:
        return [
            ("frame_encoder", self.frame_encoder.parameters()),
            ("event_encoder", self.event_encoder.parameters()),
            ("aha", self.aha.parameters()),
            ("pafpn", self.pafpn.parameters()),
            ("head", self.head.parameters()),
            ("gen_frame", [p for g in self.gen_frame for p in g.parameters()]),
            ("gen_event", [p for g in self.gen_event for p in g.parameters()]),
        ]

    def parameters(self) -> list[Tensor]:
        return [p for _, ps in self.groups() for p in ps]

    def generators(self, branch: str) -> list[AhaParams]:
        return self.gen_frame if branch == "frame" else self.gen_event


@dataclass
class ModelInputs:
    frame: Tensor          # [ch, H, W]
    event_image: Tensor    # [2, H, W]
    activity: ActivityMap  # on the level-5 token grid


def prepare_inputs(frame: Tensor, events: EventStream, cfg: ModelConfig,
                   window: tuple[int, int] | None = None) -> ModelInputs:
    size = cfg.image_size
    if frame.shape != (cfg.frame_channels, size, size):
        raise ShapeError(f"frame shape {frame.shape} != {(cfg.frame_channels, size, size)}")
    if (events.height, events.width) != (size, size):
        raise ShapeError(f"event sensor {events.height}x{events.width} != image {size}x{size}")
    t0, t1 = window or window_of(events)
    return ModelInputs(frame, events_to_frame(events, t0, t1, size, size),
                       activity_map(events, t0, t1, size, size, cfg.strides[2]))


def sample_inputs(s: Sample, cfg: ModelConfig) -> ModelInputs:
    return prepare_inputs(s.frame, s.events, cfg)


@dataclass
class ForwardResult:
    frame: FeaturePyramid   # pre-fusion, level 5 replaced by its hypergraph-refined map
    event: FeaturePyramid
    fused: FeaturePyramid
    head: Tensor
    selected: np.ndarray | None


def forward(params: ModelParams, inp: ModelInputs, cfg: ModelConfig, *, train: bool) -> ForwardResult:
    fcm = cfg.fcm_train if train else cfg.fcm_infer
    with nx.op_scope("encoder"):
        f = encode(inp.frame, params.frame_encoder)
        s = encode(inp.event_image, params.event_encoder)
    _, h, w = f.f5.shape
    selected = None
    with nx.op_scope("hypergraph"):
        vset = concat_vertices(f.f5, s.f5)
        edges = fcm_refine(build_initial_hyperedges(f.f5, s.f5, cfg.k), vset, fcm)
        verts = vset.vertices
        if cfg.sparse:
            sel = select_sparse_tokens(inp.activity, cfg.rho, h, w)
            selected = sel.indices
            z = sparse_aha(verts, edges.edges, params.aha, sel)
        else:
            z = aha(verts, edges.edges, params.aha)
        f5, s5 = split_modalities(z, h, w)
    f, s = f.replace(f5=f5), s.replace(f5=s5)
    with nx.op_scope("fusion"):
        fused = pafpn(fuse_add(f, s), params.pafpn)
    with nx.op_scope("head"):
        head = toy_head(fused.f3, params.head)
    return ForwardResult(f, s, fused, head, selected)


def distill_terms(res: ForwardResult, params: ModelParams, cfg: ModelConfig, step: int,
                  sample: int, branches=BRANCHES, teacher: FeaturePyramid | None = None) -> dict[str, Tensor]:
    dcfg = cfg.distill
    teacher = res.fused if teacher is None else teacher
    out = {}
    for branch in branches:
        student = res.frame if branch == "frame" else res.event
        masks = step_masks(cfg.seed, branch, (step, sample), student.shapes, dcfg.mask_ratio)
        with nx.op_scope(f"distill_{branch}"):
            out[branch] = distill_loss(student, masks, teacher, params.generators(branch), dcfg)
    return out


@dataclass
class LossTerms:
    base: Tensor
    distill_frame: Tensor
    distill_event: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"base": self.base.item(), "distill_frame": self.distill_frame.item(),
                "distill_event": self.distill_event.item(), "total": self.total.item()}


def batch_loss(params: ModelParams, batch: list[tuple[ModelInputs, DetectionTargets]], cfg: ModelConfig,
               step: int, *, log_inactive: bool = True,
               teachers: list[FeaturePyramid] | None = None) -> LossTerms:
    """Mean over the batch of base + lambda_f * d_frame + lambda_e * d_event.

    A branch whose weight is zero never enters the graph; with ``log_inactive``
    its value is still computed off-tape so it can be logged. ``teachers``
    replaces the fused pyramids as distillation targets (one per sample).
    """
    weights = {"frame": cfg.lambda_frame, "event": cfg.lambda_event}
    active = [b for b in BRANCHES if weights[b] > 0]
    inactive = [b for b in BRANCHES if weights[b] == 0]
    acc = None
    for i, (inp, tgt) in enumerate(batch):
        res = forward(params, inp, cfg, train=True)
        base = base_loss(res.head, tgt, cfg.num_classes)
        teacher = None if teachers is None else teachers[i]
        d = distill_terms(res, params, cfg, step, i, active, teacher)
        if inactive and log_inactive:
            with nx.no_grad():
                d.update(distill_terms(res, params, cfg, step, i, inactive, teacher))
        df, de = d.get("frame", Tensor(0.0)), d.get("event", Tensor(0.0))
        terms = (base, df, de, total_loss(base, df, de, cfg.lambda_frame, cfg.lambda_event))
        acc = terms if acc is None else tuple(nx.add(a, t) for a, t in zip(acc, terms))
    n = 1.0 / len(batch)
    return LossTerms(*(nx.scale(t, n) for t in acc))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RunMetrics:
    steps: list[dict] = field(default_factory=list)
    attention_multiplies: int = 0
    final: dict = field(default_factory=dict)
    wall_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        # wall time is deliberately excluded so the file stays bitwise reproducible
        return {"steps": self.steps, "attention_multiplies_per_sample": self.attention_multiplies,
                "final": self.final}


def training_batch(cfg: ModelConfig):
    return [(sample_inputs(s, cfg), s.targets) for s in moving_squares(cfg)]


def sgd_step(params: ModelParams, grads: dict, lr: float) -> None:
    for p in params.parameters():
        g = grads.get(p)
        if g is not None:
            p.data = p.data - lr * g


def feature_alignment(params: ModelParams, batch, cfg: ModelConfig) -> float:
    """Mean SSE between generated (masked student) features and detached fused features."""
    vals = []
    with nx.no_grad():
        for i, (inp, _) in enumerate(batch):
            res = forward(params, inp, cfg, train=True)
            d = distill_terms(res, params, cfg, EVAL_STEP, i)
            vals.extend(d[b].item() / 3.0 for b in BRANCHES)
    return float(np.mean(vals))


def train(cfg: ModelConfig, steps: int, log=None) -> tuple[ModelParams, RunMetrics]:
    """Full-batch gradient descent on the synthetic moving-square set."""
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    t_start = time.perf_counter()
    params = ModelParams.init(cfg)
    batch = training_batch(cfg)
    metrics = RunMetrics()
    with nx.count_ops() as counter:
        with nx.no_grad():
            forward(params, batch[0][0], cfg, train=True)
    metrics.attention_multiplies = counter.attention_multiplies

    for step in range(steps + 1):
        try:
            with Tape() as tape:
                terms = batch_loss(params, batch, cfg, step)
            row = {"step": step, **terms.values()}
            if not all(math.isfinite(v) for v in row.values()):
                raise TrainingDiverged(step, "non-finite loss")
            metrics.steps.append(row)
            if log is not None:
                log(row)
            if step == steps:
                break
            sgd_step(params, nx.backward(terms.total, tape), cfg.learning_rate)
        except nx.NumericalError as exc:
            raise TrainingDiverged(step, str(exc)) from exc

    first, last = metrics.steps[0]["total"], metrics.steps[-1]["total"]
    metrics.final = {
        "initial_total": first,
        "final_total": last,
        "loss_reduction": 1.0 - last / first,
        "feature_alignment_sse": feature_alignment(params, batch, cfg),
        "all_finite": True,
    }
    metrics.wall_seconds = time.perf_counter() - t_start
    return params, metrics


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def gradcheck(cfg: ModelConfig, per_group: int = 8, tolerance: float = 1e-4, corrupt: bool = False,
              step: float = 1e-4) -> nx.GradCheckReport:
    """Central-difference check of the full training loss on sampled parameter entries."""
    params = ModelParams.init(cfg)
    batch = training_batch(cfg)
    tensors, labels, indices = [], [], []
    rng = SplitMix64(derive_seed(cfg.seed, "gradcheck"))
    for label, group in params.groups():
        base = len(tensors)
        tensors.extend(group)
        labels.extend([label] * len(group))
        sizes = np.array([p.size for p in group])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        total = int(offsets[-1])
        picked: list[int] = []
        while len(picked) < min(per_group, total):
            j = int(rng.integers(0, total))
            if j not in picked:
                picked.append(j)
        for j in picked:
            t = int(np.searchsorted(offsets, j, side="right") - 1)
            indices.append((base + t, j - int(offsets[t])))

    # The teacher is a stop-gradient target, so the differenced function must
    # hold it at its unperturbed value to match what the tape differentiates.
    with nx.no_grad():
        teachers = [forward(params, inp, cfg, train=True).fused for inp, _ in batch]

    def f():
        return batch_loss(params, batch, cfg, 0, log_inactive=False, teachers=teachers).total

    def spoil(grads):
        return [g + 0.1 for g in grads]

    return nx.finite_diff_check(f, tensors, step=step, tolerance=tolerance, indices=indices,
                                labels=labels, corrupt=spoil if corrupt else None)


# ---------------------------------------------------------------------------
# Inference and sparsity benchmark
# ---------------------------------------------------------------------------


def infer(params: ModelParams, inp: ModelInputs, cfg: ModelConfig):
    """Inference forward under op counting; returns (result, counter)."""
    with nx.count_ops() as counter, nx.no_grad():
        res = forward(params, inp, cfg, train=False)
    return res, counter


def decode_predictions(head: np.ndarray, grid: int, stride: int, num_classes: int,
                       threshold: float = 0.5) -> dict:
    obj = 1.0 / (1.0 + np.exp(-head[:, 0]))
    dets = []
    for idx in np.flatnonzero(obj > threshold):
        i, j = divmod(int(idx), grid)
        dx, dy, bw, bh = head[idx, 1:5]
        dets.append({
            "cell": [i, j], "score": float(obj[idx]),
            "box": [float((j + dx) * stride), float((i + dy) * stride), float(bw * 16.0), float(bh * 16.0)],
            "class": int(np.argmax(head[idx, 5:5 + num_classes])),
        })
    return {"objectness": obj.reshape(grid, grid).tolist(), "detections": dets}


def bench_inputs(cfg: ModelConfig) -> ModelInputs:
    return sample_inputs(make_sample(cfg.seed, 0, cfg.image_size, cfg.stride_base, cfg.event_threshold,
                                     cfg.num_classes), cfg)


def bench_sparsity(cfg: ModelConfig, rhos, m_values=()) -> tuple[list[dict], list[dict]]:
    """Attention multiply counts (deterministic rows) and wall times (separate rows)."""
    params = ModelParams.init(cfg)
    inp = bench_inputs(cfg)
    dense_cfg = cfg.replace(sparse=False)
    _, dense = infer(params, inp, dense_cfg)
    hw = inp.activity.grid.size
    rows = [{"kind": "dense", "rho": 1.0, "m": cfg.num_hyperedges, "tokens": hw,
             "multiplies": dense.attention_multiplies, "ratio": 1.0}]
    timings = []
    for rho in rhos:
        run_cfg = cfg.replace(sparse=True, rho=float(rho))
        t0 = time.perf_counter()
        res, counter = infer(params, inp, run_cfg)
        timings.append({"kind": "rho", "rho": float(rho), "wall_ms": 1e3 * (time.perf_counter() - t0)})
        rows.append({"kind": "rho", "rho": float(rho), "m": cfg.num_hyperedges, "tokens": len(res.selected),
                     "multiplies": counter.attention_multiplies,
                     "ratio": counter.attention_multiplies / dense.attention_multiplies})
    if m_values:
        with nx.no_grad():
            f5 = encode(inp.frame, params.frame_encoder).f5
            s5 = encode(inp.event_image, params.event_encoder).f5
            verts = concat_vertices(f5, s5).vertices
        rng = SplitMix64(derive_seed(cfg.seed, "bench_edges"))
        for m in m_values:
            edges = Tensor(rng.uniform((int(m), cfg.channels), -1.0, 1.0))
            t0 = time.perf_counter()
            with nx.count_ops() as counter, nx.no_grad():
                aha(verts, edges, params.aha)
            timings.append({"kind": "m", "rho": 1.0, "m": int(m), "wall_ms": 1e3 * (time.perf_counter() - t0)})
            rows.append({"kind": "m", "rho": 1.0, "m": int(m), "tokens": hw,
                         "multiplies": counter.attention_multiplies,
                         "ratio": counter.attention_multiplies / dense.attention_multiplies})
    return rows, timings
