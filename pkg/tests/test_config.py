import pytest

from priorhead.config import Config, ConfigError, dump_config, load_config, parse_config


def test_defaults_and_roundtrip(tmp_path):
    cfg = parse_config("")
    assert cfg == Config()
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_values_are_typed():
    cfg = parse_config("""
[train]
lr = 1e-3
perceptual_layers = 0, 2
max_steps = 5
[net]
num_keypoints = 5
[prior]
backend = external
cache_file = x.npz
""")
    assert cfg.train.lr == 1e-3 and cfg.train.perceptual_layers == (0, 2) and cfg.train.max_steps == 5
    assert cfg.net.num_keypoints == 5
    assert cfg.prior.backend == "external" and cfg.prior.cache_file == "x.npz"


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as info:
        parse_config("""
[train]
lr = -1
dropout_max = 70
bogus = 1
[net]
image_size = abc
[prior]
backend = magic
[extra]
a = 1
""")
    probs = info.value.problems
    text = "\n".join(probs)
    for needle in ("lr", "dropout_max", "bogus", "image_size", "backend", "[extra]"):
        assert needle in text
    assert len(probs) >= 6


def test_syntax_error():
    with pytest.raises(ConfigError):
        parse_config("no section header")
