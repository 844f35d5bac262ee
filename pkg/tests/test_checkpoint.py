"""Checkpoint container tests: byte-identical round trips, digest
enforcement, corruption detection, and tensor application errors."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semar.checkpoint import (MAGIC, CheckpointError, apply_tensors,
                              config_digest, load_checkpoint, save_checkpoint,
                              stored_digest)
from semar.tensor import Tensor


def sample_tensors():
    rng = np.random.default_rng(0)
    return {"b.weight": rng.standard_normal((3, 4)).astype(np.float32),
            "a.bias": rng.standard_normal(7).astype(np.float32),
            "scalarish": np.float32(2.5) * np.ones((), dtype=np.float32)}


DIGEST = config_digest({"setting": 1})


class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, sample_tensors(), DIGEST)
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded, DIGEST)
        assert p1.read_bytes() == p2.read_bytes()

    def test_values_survive(self, tmp_path):
        p = tmp_path / "x.ckpt"
        tensors = sample_tensors()
        save_checkpoint(p, tensors, DIGEST)
        loaded = load_checkpoint(p)
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert np.array_equal(loaded[name], tensors[name])

    def test_accepts_tensor_objects(self, tmp_path):
        p = tmp_path / "t.ckpt"
        save_checkpoint(p, {"w": Tensor(np.ones((2, 2), dtype=np.float32))}, DIGEST)
        assert np.array_equal(load_checkpoint(p)["w"], np.ones((2, 2)))

    @given(seed=st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_roundtrip_random_shapes(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        tensors = {}
        for i in range(rng.integers(1, 5)):
            shape = tuple(int(s) for s in rng.integers(1, 5, size=rng.integers(0, 4)))
            tensors[f"t{i}"] = rng.standard_normal(shape).astype(np.float32)
        p = tmp_path_factory.mktemp("ck") / "r.ckpt"
        save_checkpoint(p, tensors, DIGEST)
        loaded = load_checkpoint(p)
        for name in tensors:
            assert np.array_equal(loaded[name], tensors[name])


class TestDigest:
    def test_digest_is_canonical(self):
        a = config_digest({"x": 1, "y": [1, 2]})
        b = config_digest({"y": [1, 2], "x": 1})
        assert a == b and len(a) == 32

    def test_digest_differs_on_change(self):
        assert config_digest({"x": 1}) != config_digest({"x": 2})

    def test_mismatch_rejected_with_hexes(self, tmp_path):
        p = tmp_path / "d.ckpt"
        save_checkpoint(p, sample_tensors(), DIGEST)
        other = config_digest({"setting": 2})
        with pytest.raises(CheckpointError, match="digest mismatch") as e:
            load_checkpoint(p, expect_digest=other)
        assert DIGEST.hex()[:12] in str(e.value)
        assert other.hex()[:12] in str(e.value)

    def test_stored_digest(self, tmp_path):
        p = tmp_path / "s.ckpt"
        save_checkpoint(p, sample_tensors(), DIGEST)
        assert stored_digest(p) == DIGEST

    def test_no_check_when_not_requested(self, tmp_path):
        p = tmp_path / "n.ckpt"
        save_checkpoint(p, sample_tensors(), DIGEST)
        load_checkpoint(p)  # no digest given: loads fine


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(p)

    def test_truncation_everywhere(self, tmp_path):
        p = tmp_path / "full.ckpt"
        save_checkpoint(p, sample_tensors(), DIGEST)
        blob = p.read_bytes()
        # cutting the file at any proper prefix must raise, never crash
        for cut in (3, 7, 20, 41, 45, len(blob) - 5):
            q = tmp_path / f"cut{cut}.ckpt"
            q.write_bytes(blob[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(q)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "trail.ckpt"
        save_checkpoint(p, sample_tensors(), DIGEST)
        p.write_bytes(p.read_bytes() + b"\x00\x01")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v.ckpt"
        save_checkpoint(p, sample_tensors(), DIGEST)
        blob = bytearray(p.read_bytes())
        blob[4] = 99
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_bad_digest_length(self, tmp_path):
        with pytest.raises(CheckpointError, match="32 bytes"):
            save_checkpoint(tmp_path / "x.ckpt", sample_tensors(), b"short")


class TestApplyTensors:
    def test_applies_values(self):
        live = {"w": Tensor(np.zeros((2, 2), dtype=np.float32))}
        apply_tensors(live, {"w": np.ones((2, 2), dtype=np.float32)})
        assert np.array_equal(live["w"].data, np.ones((2, 2)))

    def test_missing_tensor_named(self):
        live = {"w": Tensor(np.zeros(2)), "v": Tensor(np.zeros(2))}
        with pytest.raises(CheckpointError, match=r"missing tensors \['v'\]"):
            apply_tensors(live, {"w": np.zeros(2, dtype=np.float32)})

    def test_shape_mismatch_named(self):
        live = {"w": Tensor(np.zeros((2, 3), dtype=np.float32))}
        with pytest.raises(CheckpointError, match="'w'"):
            apply_tensors(live, {"w": np.zeros((3, 2), dtype=np.float32)})

    def test_extra_loaded_tensors_ignored(self):
        live = {"w": Tensor(np.zeros(2, dtype=np.float32))}
        apply_tensors(live, {"w": np.ones(2, dtype=np.float32),
                             "stale": np.zeros(9, dtype=np.float32)})
        assert np.array_equal(live["w"].data, np.ones(2))
