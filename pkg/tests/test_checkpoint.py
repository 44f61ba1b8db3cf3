"""Tests for the binary checkpoint container."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from affordancelib import checkpoint as ckpt
from affordancelib.exceptions import CheckpointError
from affordancelib.model import AffordanceDenoiser, tiny_config


def _sample() -> ckpt.Checkpoint:
    rng = np.random.default_rng(0)
    return ckpt.Checkpoint(
        tensors={
            "w": rng.standard_normal((3, 4)).astype(np.float32),
            "b": rng.standard_normal(4),
            "scalar": np.array(2.5),
            "counts": np.arange(6, dtype=np.int64).reshape(2, 3),
            "optimizer/m/w": np.zeros((3, 4), dtype=np.float32),
            "optimizer/v/w": np.ones((3, 4), dtype=np.float32),
        },
        config={"model": {"d_model": 32}},
        state=ckpt.TrainingState(step=7, updates=6, stage="pretrain", best_mae=0.125),
    )


class TestContainer:
    """Test encoding and decoding."""

    def test_round_trip_is_bit_exact(self) -> None:
        original = _sample()
        restored = ckpt.decode(ckpt.encode(original))
        assert restored.tensors.keys() == original.tensors.keys()
        for name, value in original.tensors.items():
            assert restored.tensors[name].dtype == value.dtype
            assert restored.tensors[name].shape == value.shape
            assert restored.tensors[name].tobytes() == value.tobytes()
        assert restored.config == original.config
        assert restored.state == original.state

    def test_layout(self) -> None:
        """Magic, little-endian header length, then a sorted-key JSON header."""
        data = ckpt.encode(_sample())
        assert data[:8] == ckpt.MAGIC
        (length,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16 : 16 + length])
        assert header["version"] == ckpt.FORMAT_VERSION
        assert [entry["name"] for entry in header["tensors"]] == sorted(_sample().tensors)
        assert header["state"]["step"] == 7

    def test_encoding_is_deterministic(self) -> None:
        assert ckpt.encode(_sample()) == ckpt.encode(_sample())

    def test_bad_magic(self) -> None:
        with pytest.raises(CheckpointError, match="bad magic"):
            ckpt.decode(b"NOTACKPT" + bytes(16))

    def test_truncated_header(self) -> None:
        data = ckpt.encode(_sample())
        with pytest.raises(CheckpointError, match="truncated"):
            ckpt.decode(data[:20])

    def test_truncated_payload(self) -> None:
        data = ckpt.encode(_sample())
        with pytest.raises(CheckpointError, match="truncated or inconsistent"):
            ckpt.decode(data[:-1])

    def test_unsupported_version(self) -> None:
        header = json.dumps({"version": 99, "tensors": []}).encode()
        with pytest.raises(CheckpointError, match="version"):
            ckpt.decode(ckpt.MAGIC + struct.pack("<Q", len(header)) + header)

    def test_unsupported_dtype(self) -> None:
        with pytest.raises(CheckpointError, match="unsupported dtype"):
            ckpt.encode(ckpt.Checkpoint(tensors={"x": np.zeros(2, dtype=np.int8)}))

    def test_optimizer_moments_split(self) -> None:
        sample = _sample()
        assert set(sample.parameters) == {"w", "b", "scalar", "counts"}
        first, second = sample.moments()
        assert set(first) == {"w"}
        np.testing.assert_array_equal(second["w"], np.ones((3, 4)))


class TestFiles:
    """Test saving, loading and path resolution."""

    def test_save_and_load(self, tmp_path: Path) -> None:
        path = tmp_path / "run" / "best.ckpt"
        ckpt.save(path, _sample())
        assert ckpt.load(path).state.step == 7

    def test_resolve_shorthand(self, tmp_path: Path) -> None:
        """``dir/best`` resolves to ``dir/best.ckpt``."""
        ckpt.save(tmp_path / "best.ckpt", _sample())
        assert ckpt.resolve(tmp_path / "best") == tmp_path / "best.ckpt"
        assert ckpt.load(tmp_path / "best").state.stage == "pretrain"

    def test_missing(self, tmp_path: Path) -> None:
        with pytest.raises(CheckpointError, match="no checkpoint"):
            ckpt.load(tmp_path / "absent")


class TestModelCheckpoint:
    """Test round-tripping a denoiser through a checkpoint."""

    def test_restore_reproduces_parameters(self) -> None:
        config = tiny_config()
        model = AffordanceDenoiser(config, seed=3)
        saved = ckpt.model_checkpoint(model, {"model": config.to_dict()}, ckpt.TrainingState(step=1))
        restored = ckpt.restore_model(ckpt.decode(ckpt.encode(saved)))
        assert restored.config == config
        for name, value in model.store.state().items():
            np.testing.assert_array_equal(restored.store[name].data, value)

    def test_moments_are_stored(self) -> None:
        model = AffordanceDenoiser(tiny_config())
        first = {name: np.ones_like(t.data) for name, t in model.store.items()}
        second = {name: np.zeros_like(t.data) for name, t in model.store.items()}
        saved = ckpt.model_checkpoint(model, {}, ckpt.TrainingState(), (first, second))
        m, v = ckpt.decode(ckpt.encode(saved)).moments()
        assert m.keys() == first.keys()
        assert v.keys() == second.keys()

    def test_missing_model_config(self) -> None:
        saved = ckpt.model_checkpoint(AffordanceDenoiser(tiny_config()), {}, ckpt.TrainingState())
        with pytest.raises(CheckpointError, match="model config"):
            ckpt.restore_model(saved)

    def test_architecture_mismatch(self) -> None:
        """Loading into a different architecture names the offending tensor."""
        saved = ckpt.model_checkpoint(
            AffordanceDenoiser(tiny_config()), {}, ckpt.TrainingState()
        )
        with pytest.raises(CheckpointError, match="head"):
            ckpt.restore_model(saved, tiny_config(disable_sial=True))
