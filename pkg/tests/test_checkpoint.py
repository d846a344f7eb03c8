import struct

import numpy as np
import pytest

from mixedsn import checkpoint
from mixedsn.checkpoint import MAGIC, CheckpointError
from mixedsn.network import build_mixedsn, tiny_network


@pytest.fixture
def saved(tmp_path):
    net, params = tiny_network(4, seed=2)
    path = tmp_path / "c.mxsn"
    checkpoint.save(path, net, params, seed=2, extra={"note": "x"})
    return path, net, params


class TestCheckpoint:
    def test_round_trip_bitwise(self, saved, tmp_path):
        path, net, params = saved
        net2, params2, manifest = checkpoint.load(path)
        assert net2 == net
        assert params2.names() == params.names()
        assert all(params[n].tobytes() == params2[n].tobytes() for n in params)
        assert manifest["seed"] == 2 and manifest["extra"] == {"note": "x"}
        checkpoint.save(tmp_path / "d.mxsn", net2, params2, seed=2, extra={"note": "x"})
        assert path.read_bytes() == (tmp_path / "d.mxsn").read_bytes()

    def test_float64(self, tmp_path):
        net, params = tiny_network(3, dtype=np.float64)
        checkpoint.save(tmp_path / "c", net, params, 0)
        _, p2, _ = checkpoint.load(tmp_path / "c")
        assert p2["stem.weight"].dtype == np.float64

    def test_layout(self, saved):
        path, net, params = saved
        data = path.read_bytes()
        assert data[:8] == MAGIC
        (n,) = struct.unpack("<Q", data[8:16])
        assert len(data) == 16 + n + 4 * params.total

    def test_bad_magic(self, saved):
        path, *_ = saved
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.decode(b"NOTACKPT" + path.read_bytes()[8:])

    def test_truncated(self, saved):
        path, *_ = saved
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.decode(path.read_bytes()[:-3])

    def test_trailing(self, saved):
        path, *_ = saved
        with pytest.raises(CheckpointError, match="trailing"):
            checkpoint.decode(path.read_bytes() + b"\0")

    def test_layout_mismatch(self, tmp_path):
        net, _ = tiny_network(4)
        _, other = tiny_network(5)
        with pytest.raises(CheckpointError, match="do not match"):
            checkpoint.decode(checkpoint.encode(net, other, 0))

    def test_ip_profile(self, tmp_path):
        net, params = build_mixedsn("ip")
        _, p2, _ = checkpoint.decode(checkpoint.encode(net, params, 0))
        assert p2.total == 321_488
