"""Command-line entry points.

Every command writes deterministic files: wall-clock timings go to stderr or
to an explicit ``--timing`` sidecar, never into the main output.

Exit codes: 0 success, 1 validation failure, 2 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from . import model as M
from .config import ModelConfig, load_config
from .data import make_sample
from .events import EventParseError, read_events, write_events
from .numerics import ConfigError, ShapeError, Tensor, load_tensor, save_tensor

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
GRADCHECK_MAX_IMAGE = 32
SPARSE_SCOPES = ("mask", "generator")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _load_cfg(path) -> ModelConfig:
    try:
        return load_config(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc.strerror or exc}") from exc
    except ConfigError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from exc


def _write_json(path, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(obj, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc.strerror or exc}") from exc


def _write_csv(path, rows: list[dict], columns: list[str]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc.strerror or exc}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def save_params(path, params: M.ModelParams) -> None:
    np.savez(path, *[p.data for p in params.parameters()])


def load_params(path, cfg: ModelConfig) -> M.ModelParams:
    params = M.ModelParams.init(cfg)
    try:
        with np.load(path) as npz:
            arrays = [npz[f"arr_{i}"] for i in range(len(npz.files))]
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"{path}: cannot read parameters ({exc})") from exc
    targets = params.parameters()
    if len(arrays) != len(targets) or any(a.shape != t.shape for a, t in zip(arrays, targets)):
        raise CliError(EXIT_INVALID, f"{path}: parameters do not match the config")
    for t, a in zip(targets, arrays):
        t.data = a.astype(np.float64)
    return params


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def forward_report(params: M.ModelParams, inp: M.ModelInputs, cfg: ModelConfig) -> dict:
    res, counter = M.infer(params, inp, cfg)
    stride = cfg.strides[0]
    grid = cfg.image_size // stride
    by_scope = counter.by_scope()
    return {
        "predictions": M.decode_predictions(res.head.data, grid, stride, cfg.num_classes),
        "head_shape": list(res.head.shape),
        "fcm_iters": cfg.fcm_iters_infer,
        "sparse": cfg.sparse,
        "selected_tokens": None if res.selected is None else [int(i) for i in res.selected],
        "attention_multiplies": counter.attention_multiplies,
        "ops_by_scope": by_scope,
        "auxiliary_ops": {name: counter.ops_within(name) for name in SPARSE_SCOPES},
    }


def cmd_forward(args) -> int:
    cfg = _load_cfg(args.config)
    try:
        frame = load_tensor(args.frame)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"{args.frame}: {exc}") from exc
    if frame.ndim == 2:
        frame = Tensor(frame.data[None])
    try:
        events = read_events(args.events, cfg.image_size, cfg.image_size)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{args.events}: {exc.strerror or exc}") from exc
    except EventParseError as exc:
        raise CliError(EXIT_IO, f"{args.events}: {exc}") from exc
    params = load_params(args.params, cfg) if args.params else M.ModelParams.init(cfg)
    try:
        inp = M.prepare_inputs(frame, events, cfg)
    except (ShapeError, ConfigError) as exc:
        raise CliError(EXIT_INVALID, f"{args.frame}: {exc}") from exc
    _write_json(args.out, forward_report(params, inp, cfg))
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = _load_cfg(args.config)
    if args.steps < 0:
        raise CliError(EXIT_INVALID, "--steps must be >= 0")

    def log(row):
        if args.verbose and (row["step"] % 25 == 0 or row["step"] == args.steps):
            print(f"step {row['step']:4d} total {row['total']:.6f} base {row['base']:.6f}", file=sys.stderr)

    try:
        params, metrics = M.train(cfg, args.steps, log=log)
    except M.TrainingDiverged as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    _write_json(args.out, metrics.to_json_dict())
    if args.save_params:
        save_params(args.save_params, params)
    if args.timing:
        _write_json(args.timing, {"wall_seconds": metrics.wall_seconds})
    print(f"trained {args.steps} steps in {metrics.wall_seconds:.1f} s; "
          f"loss {metrics.final['initial_total']:.4f} -> {metrics.final['final_total']:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args.config)
    if cfg.image_size > GRADCHECK_MAX_IMAGE:
        raise CliError(EXIT_INVALID, f"gradcheck needs image_size <= {GRADCHECK_MAX_IMAGE}, got {cfg.image_size}")
    t0 = time.perf_counter()
    rep = M.gradcheck(cfg, per_group=args.per_group, tolerance=args.tolerance, corrupt=args.corrupt_grad)
    elapsed = time.perf_counter() - t0
    report = {
        "passed": rep.passed,
        "tolerance": rep.tolerance,
        "checked": len(rep.entries),
        "worst_rel_error": rep.worst,
        "worst_by_module": rep.worst_by_label(),
    }
    for label, err in report["worst_by_module"].items():
        print(f"{label:16s} worst rel err {err:.3e}")
    print(f"{'PASS' if rep.passed else 'FAIL'}: {len(rep.entries)} entries, worst {rep.worst:.3e} "
          f"(tolerance {rep.tolerance:g}), {elapsed:.1f} s")
    if args.out:
        report["entries"] = [vars(e) for e in rep.entries]
        _write_json(args.out, report)
    return EXIT_OK if rep.passed else EXIT_INVALID


BENCH_COLUMNS = ["kind", "rho", "m", "tokens", "multiplies", "ratio"]


def cmd_bench_sparsity(args) -> int:
    cfg = _load_cfg(args.config)
    bad = [r for r in args.rho if not 0.0 < r <= 1.0]
    if bad or any(m < 1 for m in args.m):
        raise CliError(EXIT_INVALID, "rho values must be in (0, 1] and m values >= 1")
    rows, timings = M.bench_sparsity(cfg, args.rho, args.m)
    _write_csv(args.out, rows, BENCH_COLUMNS)
    if args.timing:
        _write_csv(args.timing, timings, ["kind", "rho", "m", "wall_ms"])
    for r in rows:
        print(f"{r['kind']:5s} rho={r['rho']:<5g} m={r['m']:<3d} multiplies={r['multiplies']:<9d} "
              f"ratio={r['ratio']:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load_cfg(args.config)
    s = make_sample(cfg.seed, args.index, cfg.image_size, cfg.stride_base, cfg.event_threshold, cfg.num_classes)
    try:
        save_tensor(args.frame, s.frame)
        write_events(args.events, s.events)
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    print(f"square at {s.box}, {len(s.events)} events", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hgfuse", description="Frame/event hypergraph fusion toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run inference on one frame and event stream")
    p.add_argument("--config", required=True)
    p.add_argument("--frame", required=True, help="frame tensor dump (.hft)")
    p.add_argument("--events", required=True, help="events CSV (t_us,x,y,p)")
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--params", help="parameters saved by train-toy (.npz); default is the seeded init")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("train-toy", help="train on the synthetic moving-square set")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--save-params", help="write trained parameters (.npz)")
    p.add_argument("--timing", help="write wall time to this JSON sidecar")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    p.add_argument("--config", required=True)
    p.add_argument("--per-group", type=int, default=8, help="sampled entries per parameter group")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="report JSON")
    p.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-sparsity", help="attention multiply counts across rho and m")
    p.add_argument("--config", required=True)
    p.add_argument("--rho", type=_float_list, default=[0.25, 0.5, 1.0])
    p.add_argument("--m", type=_int_list, default=[], help="hyperedge counts for the m sweep")
    p.add_argument("--out", required=True, help="CSV table")
    p.add_argument("--timing", help="write wall times to this CSV sidecar")
    p.set_defaults(func=cmd_bench_sparsity)

    p = sub.add_parser("synth", help="write one synthetic frame and event file")
    p.add_argument("--config", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--frame", required=True)
    p.add_argument("--events", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
