"""Checkpoint byte format and config parsing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ztw.autodiff import Tensor
from ztw.checkpoint import MAGIC, assign_entries, load_checkpoint, save_checkpoint
from ztw.config import (format_config, load_config, parse_config_text, parse_grid,
                        resolve_config)
from ztw.exceptions import ConfigError, DataFormatError


def test_checkpoint_roundtrip(tmp_path):
    entries = [("backbone.0.weight", np.arange(6.0).reshape(2, 3)),
               ("ic1.pool.gamma", np.array(0.5)),
               ("ens2.raw_w", np.array([0.1, -0.2]))]
    path = tmp_path / "model.ztw"
    save_checkpoint(str(path), entries)
    loaded = load_checkpoint(str(path))
    assert list(loaded) == [n for n, _ in entries]
    for name, arr in entries:
        assert np.array_equal(loaded[name], arr)


def test_checkpoint_magic_bytes(tmp_path):
    path = tmp_path / "model.ztw"
    save_checkpoint(str(path), [("a", np.zeros(1))])
    assert path.read_bytes()[:8] == b"ZTWCKPT1" == MAGIC


def test_checkpoint_exact_layout(tmp_path):
    path = tmp_path / "model.ztw"
    save_checkpoint(str(path), [("ab", np.array([1.0, 2.0]))])
    blob = path.read_bytes()
    want = (b"ZTWCKPT1"
            + (1).to_bytes(4, "little")
            + (2).to_bytes(4, "little") + b"ab"
            + (1).to_bytes(4, "little")
            + (2).to_bytes(4, "little")
            + np.array([1.0, 2.0], dtype="<f8").tobytes())
    assert blob == want


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ztw"
    path.write_bytes(b"NOTMAGIC" + bytes(8))
    with pytest.raises(DataFormatError):
        load_checkpoint(str(path))


def test_checkpoint_truncation(tmp_path):
    path = tmp_path / "model.ztw"
    save_checkpoint(str(path), [("a", np.zeros(4))])
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(DataFormatError) as e:
        load_checkpoint(str(path))
    assert "byte" in str(e.value)


def test_assign_entries_shape_check(tmp_path):
    path = tmp_path / "model.ztw"
    save_checkpoint(str(path), [("w", np.zeros((2, 2)))])
    loaded = load_checkpoint(str(path))
    t = Tensor(np.zeros((2, 3)))
    with pytest.raises(DataFormatError):
        assign_entries([("w", t)], loaded)


@settings(max_examples=30, deadline=None)
@given(arrays(dtype=np.float64, shape=array_shapes(max_dims=3, max_side=4),
              elements=st.floats(-1e6, 1e6)))
def test_checkpoint_roundtrip_property(arr):
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        path = f"{d}/t.ztw"
        save_checkpoint(path, [("t", arr)])
        assert np.array_equal(load_checkpoint(path)["t"], arr)


# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_overrides():
    cfg = resolve_config(parse_config_text("trainer.lr = 0.5\nmodel.kind = cnn\n"))
    assert cfg["trainer.lr"] == 0.5
    assert cfg["model.kind"] == "cnn"
    assert cfg["trainer.epochs"] == 50  # default


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError):
        resolve_config(parse_config_text("trainer.momentum = 0.9\n"))


def test_config_bad_value_rejected():
    with pytest.raises(ConfigError):
        resolve_config(parse_config_text("trainer.epochs = soon\n"))
    with pytest.raises(ConfigError):
        resolve_config(parse_config_text("trainer.cascade = yes\n"))


def test_config_duplicate_key_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("trainer.lr = 0.1\ntrainer.lr = 0.2\n")


def test_config_roundtrip():
    cfg = resolve_config(parse_config_text("trainer.lr = 0.25\n"))
    text = format_config(cfg)
    again = resolve_config(parse_config_text(text))
    assert again == cfg
    assert "trainer.lr = 0.25" in text


def test_config_missing_file():
    with pytest.raises(ConfigError) as e:
        load_config("/nonexistent/run.cfg")
    assert "/nonexistent/run.cfg" in str(e.value)


def test_config_comments_and_blanks():
    cfg = resolve_config(parse_config_text("# a comment\n\ntrainer.epochs = 3\n"))
    assert cfg["trainer.epochs"] == 3


def test_grid_spec_standard():
    grid = parse_grid("0:1:0.01,1.01")
    assert len(grid) == 102
    assert grid[0] == 0.0 and grid[100] == 1.0 and grid[-1] == 1.01


def test_grid_single_values_and_ranges():
    assert parse_grid("0.5") == [0.5]
    assert parse_grid("1:3:1") == [1.0, 2.0, 3.0]
    assert parse_grid("0.1:0.3:0.1,0.9") == [0.1, 0.2, 0.3, 0.9]


def test_grid_must_increase():
    with pytest.raises(ConfigError):
        parse_grid("0.5,0.4")
    with pytest.raises(ConfigError):
        parse_grid("0:1:-0.1")
