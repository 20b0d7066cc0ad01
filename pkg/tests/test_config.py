from __future__ import annotations

from pathlib import Path

import pytest

from ntdiff.config import ExperimentConfig, from_dict, load_config, parse_override
from ntdiff.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.tree.L == 4 and cfg.diffusion.D_train == 1000 and cfg.horizons == 27
    assert cfg.data.resolution == [128, 128]


def test_shipped_configs_load():
    for name in ("default.yaml", "desk.yaml"):
        cfg = load_config(CONFIGS / name)
        assert isinstance(cfg.train.lr_max, float)
    desk = load_config(CONFIGS / "desk.yaml")
    assert desk.data.synthetic and desk.horizons == 9 and desk.tree.L == 3


def test_precedence_cli_over_file_over_default(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("tree:\n  L: 3\ntrain:\n  lr_max: 1e-3\n")
    cfg = load_config(f)
    assert cfg.tree.L == 3 and cfg.train.lr_max == 1e-3 and cfg.train.batch_size == 4
    cfg = load_config(f, ["tree.L=2", "train.batch_size=16"])
    assert cfg.tree.L == 2 and cfg.train.batch_size == 16 and cfg.train.lr_max == 1e-3


def test_override_parsing():
    assert parse_override("a.b=3") == ("a.b", 3)
    assert parse_override("tree.branching=[3, 9]") == ("tree.branching", [3, 9])
    assert parse_override("data.csv=/x/y.csv") == ("data.csv", "/x/y.csv")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_unknown_keys_and_bad_types(tmp_path):
    with pytest.raises(ConfigError, match="tree.depth"):
        from_dict({"tree": {"depth": 3}})
    with pytest.raises(ConfigError):
        load_config(None, ["train.lr_max=fast"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        from_dict({"tree": 4})


def test_hash_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    b.tree.L = 3
    assert a.hash() != b.hash()
