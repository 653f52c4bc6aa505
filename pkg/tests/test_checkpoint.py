import struct

import numpy as np
import pytest

from flowmaps.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from flowmaps.errors import FormatError


@pytest.fixture
def weights():
    rng = np.random.default_rng(0)
    live = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "a.bias": rng.normal(size=4).astype(np.float32)}
    ema = {k: v * 0.5 for k, v in live.items()}
    return live, ema


def test_round_trip_is_bit_exact(tmp_path, weights):
    live, ema = weights
    p = tmp_path / "m.fmap"
    save_checkpoint(p, {"model_kind": "flowmaps", "x": [1, 2]}, live, ema)
    cfg, live2, ema2 = load_checkpoint(p)
    assert cfg == {"model_kind": "flowmaps", "x": [1, 2]}
    for src, dst in ((live, live2), (ema, ema2)):
        assert src.keys() == dst.keys()
        for k in src:
            assert dst[k].dtype == np.float32 and np.array_equal(src[k], dst[k])


def test_weights_are_stored_as_float32(tmp_path):
    w = {"w": np.random.default_rng(1).normal(size=(2, 2))}
    save_checkpoint(tmp_path / "d.fmap", {}, w)
    _, live, ema = load_checkpoint(tmp_path / "d.fmap")
    assert live["w"].dtype == np.float32 and np.array_equal(live["w"], w["w"].astype(np.float32)) and ema == {}


def test_saving_twice_gives_identical_bytes(tmp_path, weights):
    save_checkpoint(tmp_path / "a", {"k": 1}, *weights)
    save_checkpoint(tmp_path / "b", {"k": 1}, *weights)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "x.fmap"
    p.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(p)


def test_unknown_version(tmp_path, weights):
    p = tmp_path / "v.fmap"
    save_checkpoint(p, {}, *weights)
    data = bytearray(p.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version 99"):
        load_checkpoint(p)


@pytest.mark.parametrize("cut", [1, 7, 40])
def test_truncated_file(tmp_path, weights, cut):
    p = tmp_path / "t.fmap"
    save_checkpoint(p, {}, *weights)
    p.write_bytes(p.read_bytes()[:-cut])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_trailing_garbage(tmp_path, weights):
    p = tmp_path / "g.fmap"
    save_checkpoint(p, {}, *weights)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(p)


def test_file_starts_with_magic(tmp_path, weights):
    save_checkpoint(tmp_path / "m", {}, *weights)
    assert (tmp_path / "m").read_bytes()[:4] == MAGIC
