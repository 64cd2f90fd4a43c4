import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgfuse.config import ModelConfig, load_config, parse_config, save_config, serialize_config
from hgfuse.numerics import ConfigError


def test_defaults_are_valid_and_desk_scale():
    cfg = ModelConfig()
    assert cfg.num_hyperedges == 8
    assert cfg.strides == (8, 16, 32)
    assert cfg.fcm_train.iters == 30 and cfg.fcm_infer.iters == 5
    assert cfg.distill.gen_k == 2
    assert (cfg.mask_ratio, cfg.lambda_frame, cfg.lambda_event) == (0.65, 2e-5, 2e-5)


def test_round_trip_default():
    cfg = ModelConfig()
    assert parse_config(serialize_config(cfg)) == cfg


@settings(max_examples=60, deadline=None)
@given(st.builds(
    dict,
    channels=st.sampled_from([4, 8, 16]),
    heads=st.sampled_from([1, 2, 4]),
    k=st.integers(1, 4),
    rho=st.floats(0.01, 1.0),
    mask_ratio=st.floats(0.0, 0.99),
    lambda_frame=st.floats(0.0, 10.0),
    fuzzifier=st.floats(1.01, 5.0),
    sparse=st.booleans(),
    seed=st.integers(0, 2**40),
    learning_rate=st.floats(1e-6, 1.0),
))
def test_round_trip_property(kw):
    cfg = ModelConfig(**kw)
    assert parse_config(serialize_config(cfg)) == cfg


def test_file_round_trip(tmp_path):
    cfg = ModelConfig(image_size=32, stride_base=4, seed=9)
    save_config(tmp_path / "c.cfg", cfg)
    assert load_config(tmp_path / "c.cfg") == cfg


def test_comments_blank_lines_and_partial_files():
    cfg = parse_config("# header\n\nchannels = 16  # trailing\nsparse = false\n")
    assert cfg == ModelConfig(channels=16, sparse=False)


@pytest.mark.parametrize("text", [
    "bogus = 1",
    "channels = 8\nchannels = 16",
    "channels 8",
    "channels = eight",
    "sparse = maybe",
    "rho = nan",
    "heads = 0",
    "heads = 3",
    "image_size = 48",
    "rho = 0",
    "gen_edges = 5",
    "fuzzifier = 1.0",
    "fcm_iters_train = -1",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_error_names_the_line():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("# c\nchannels = 8\nnope = 1\n")


def test_replace_validates():
    with pytest.raises(ConfigError):
        ModelConfig().replace(channels=6)
    assert dataclasses.replace(ModelConfig(), k=3).num_hyperedges == 18
