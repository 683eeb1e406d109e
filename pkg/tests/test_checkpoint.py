import numpy as np
import pytest

from regionreid.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "weights.a": rng.normal(size=(3, 4)).astype(np.float32),
        "weights.b": rng.normal(size=(7,)).astype(np.float64),
        "counts": np.arange(5, dtype=np.int64),
        "scalar": np.float32(2.5).reshape(()),
    }


class TestRoundTrip:
    def test_values_and_order(self, tmp_path):
        path = tmp_path / "x.ckpt"
        arrays = _arrays()
        save_checkpoint(path, arrays, "gamma = 20.0\n", epoch=17)
        data = load_checkpoint(path)
        assert data.epoch == 17
        assert data.config_text == "gamma = 20.0\n"
        assert list(data.arrays) == list(arrays)
        for name in arrays:
            assert data.arrays[name].dtype == arrays[name].dtype
            np.testing.assert_array_equal(data.arrays[name], arrays[name])

    def test_save_load_save_bytes_identical(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, _arrays(), "seed = 1\n", epoch=3)
        data = load_checkpoint(a)
        save_checkpoint(b, data.arrays, data.config_text, data.epoch)
        assert a.read_bytes() == b.read_bytes()


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_version_checked(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, {}, "", epoch=0)
        blob = bytearray(path.read_bytes())
        blob[8] = 99  # bump the version field
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, _arrays(), "seed = 1\n", epoch=0)
        (tmp_path / "cut.ckpt").write_bytes(path.read_bytes()[:-20])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")
