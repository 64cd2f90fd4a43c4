import csv
import json

import numpy as np
import pytest

from hgfuse.cli import main
from hgfuse.config import ModelConfig, save_config
from hgfuse.numerics import save_tensor

SMALL = ModelConfig(image_size=16, stride_base=1, channels=8, k=2, heads=2, fcm_iters_train=3,
                    fcm_iters_infer=2, gen_edges=4, gen_iters=3, train_samples=2)


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.cfg"
    save_config(path, SMALL)
    return path


@pytest.fixture
def sample(tmp_path, cfg_path):
    frame, events = tmp_path / "f.hft", tmp_path / "e.csv"
    assert main(["synth", "--config", str(cfg_path), "--frame", str(frame), "--events", str(events)]) == 0
    return frame, events


def run_forward(cfg, frame, events, out, *extra):
    return main(["forward", "--config", str(cfg), "--frame", str(frame), "--events", str(events),
                 "--out", str(out), *extra])


def test_forward_writes_report(tmp_path, cfg_path, sample):
    out = tmp_path / "m.json"
    assert run_forward(cfg_path, *sample, out) == 0
    rep = json.loads(out.read_text())
    assert rep["head_shape"] == [256, 7]
    assert rep["fcm_iters"] == 2
    assert rep["auxiliary_ops"] == {"mask": 0, "generator": 0}
    assert rep["attention_multiplies"] > 0
    assert set(rep["ops_by_scope"]) >= {"encoder", "hypergraph", "fusion", "head"}


def test_forward_is_bitwise_repeatable(tmp_path, cfg_path, sample):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run_forward(cfg_path, *sample, a) == 0
    assert run_forward(cfg_path, *sample, b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_forward_zero_frame_empty_events(tmp_path, cfg_path):
    frame, events, out = tmp_path / "z.hft", tmp_path / "z.csv", tmp_path / "z.json"
    save_tensor(frame, np.zeros((16, 16)))
    events.write_text("t_us,x,y,p\n")
    assert run_forward(cfg_path, frame, events, out) == 0
    assert json.loads(out.read_text())["predictions"]["detections"] == []


def test_forward_with_trained_params(tmp_path, cfg_path, sample):
    params, metrics = tmp_path / "p.npz", tmp_path / "t.json"
    assert main(["train-toy", "--config", str(cfg_path), "--steps", "2", "--out", str(metrics),
                 "--save-params", str(params)]) == 0
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run_forward(cfg_path, *sample, a) == 0
    assert run_forward(cfg_path, *sample, b, "--params", str(params)) == 0
    assert a.read_bytes() != b.read_bytes()


def test_forward_error_codes(tmp_path, cfg_path, sample):
    frame, events = sample
    out = tmp_path / "o.json"
    assert run_forward(tmp_path / "missing.cfg", frame, events, out) == 2
    assert run_forward(cfg_path, tmp_path / "missing.hft", events, out) == 2
    bad_events = tmp_path / "bad.csv"
    bad_events.write_text("1,99,0,1\n")
    assert run_forward(cfg_path, frame, bad_events, out) == 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("unknown_key = 3\n")
    assert run_forward(bad_cfg, frame, events, out) == 2
    small_frame = tmp_path / "s.hft"
    save_tensor(small_frame, np.zeros((1, 8, 8)))
    assert run_forward(cfg_path, small_frame, events, out) == 1


def test_train_toy_zero_steps(tmp_path, cfg_path):
    out = tmp_path / "t.json"
    assert main(["train-toy", "--config", str(cfg_path), "--steps", "0", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["steps"]) == 1 and rep["steps"][0]["step"] == 0
    assert set(rep["steps"][0]) == {"step", "base", "distill_frame", "distill_event", "total"}
    assert "wall_seconds" not in json.dumps(rep)


def test_train_toy_repeatable_with_timing_sidecar(tmp_path, cfg_path):
    a, b, t = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "time.json"
    assert main(["train-toy", "--config", str(cfg_path), "--steps", "3", "--out", str(a), "--timing", str(t)]) == 0
    assert main(["train-toy", "--config", str(cfg_path), "--steps", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(t.read_text())["wall_seconds"] > 0


def test_train_toy_rejects_negative_steps(tmp_path, cfg_path):
    assert main(["train-toy", "--config", str(cfg_path), "--steps", "-1", "--out", str(tmp_path / "x")]) == 1


def test_gradcheck_pass_fail_and_size_guard(tmp_path, cfg_path, capsys):
    out = tmp_path / "g.json"
    assert main(["gradcheck", "--config", str(cfg_path), "--per-group", "4", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["passed"] and rep["checked"] == 28
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--config", str(cfg_path), "--per-group", "4", "--corrupt-grad"]) == 1
    big = tmp_path / "big.cfg"
    save_config(big, ModelConfig())
    assert main(["gradcheck", "--config", str(big)]) == 1


def test_bench_sparsity_csv(tmp_path, cfg_path):
    out, timing = tmp_path / "b.csv", tmp_path / "t.csv"
    assert main(["bench-sparsity", "--config", str(cfg_path), "--rho", "0.25,0.5,1.0", "--m", "8,16,32,50",
                 "--out", str(out), "--timing", str(timing)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["kind"] for r in rows] == ["dense", "rho", "rho", "rho", "m", "m", "m", "m"]
    assert rows[3]["multiplies"] == rows[0]["multiplies"]
    assert "wall_ms" in timing.read_text()
    again = tmp_path / "b2.csv"
    main(["bench-sparsity", "--config", str(cfg_path), "--rho", "0.25,0.5,1.0", "--m", "8,16,32,50",
          "--out", str(again)])
    assert out.read_bytes() == again.read_bytes()


def test_bench_sparsity_only_full_ratio(tmp_path, cfg_path):
    out = tmp_path / "b.csv"
    assert main(["bench-sparsity", "--config", str(cfg_path), "--rho", "1.0", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2 and rows[1]["multiplies"] == rows[0]["multiplies"]


def test_bench_sparsity_validation(tmp_path, cfg_path):
    assert main(["bench-sparsity", "--config", str(cfg_path), "--rho", "1.5", "--out", str(tmp_path / "x")]) == 1


def test_argparse_errors_exit_two(cfg_path):
    with pytest.raises(SystemExit) as info:
        main(["bench-sparsity", "--config", str(cfg_path), "--rho", "a,b", "--out", "x"])
    assert info.value.code == 2
