"""Unit tests for checkpoint save and load."""

import struct

import numpy as np
import pytest
import torch

from icc_sensing.checkpoint import MAGIC, checkpoint_tensors, load_checkpoint, save_checkpoint
from icc_sensing.errors import CheckpointError
from icc_sensing.neuralsc import Architecture, init_params


def _rewrite(path, tmp_path, edit):
    data = bytearray(path.read_bytes())
    edited = edit(data)
    target = tmp_path / "edited.iccs"
    target.write_bytes(bytes(edited))
    return target


@pytest.mark.unit
class TestCheckpointRoundTrip:
    """Test cases for lossless persistence."""

    def test_bytes_stable(self, miniature_checkpoint, tmp_path):
        """Test that loading and saving again reproduces the same file."""
        again = save_checkpoint(load_checkpoint(miniature_checkpoint), tmp_path / "again.iccs")
        assert again.read_bytes() == miniature_checkpoint.read_bytes()

    def test_contents_restored(self, trained_miniature, miniature_checkpoint):
        """Test that weights, buffers, losses and Adam moments come back exactly."""
        loaded = load_checkpoint(miniature_checkpoint)
        assert loaded.arch == trained_miniature.arch
        assert loaded.loss_log == trained_miniature.loss_log
        original = trained_miniature.model.state_dict()
        for name, value in loaded.model.state_dict().items():
            assert torch.equal(value, original[name]), name
        assert loaded.optimizer_state.keys() == trained_miniature.optimizer_state.keys()
        for name, moments in trained_miniature.optimizer_state.items():
            for key, value in moments.items():
                np.testing.assert_array_equal(loaded.optimizer_state[name][key], value)

    def test_untrained(self, miniature_params, tmp_path):
        """Test a checkpoint without optimizer state or losses."""
        path = save_checkpoint(miniature_params, tmp_path / "fresh" / "model.iccs")
        loaded = load_checkpoint(path)
        assert loaded.optimizer_state == {}
        assert loaded.loss_log == []
        assert loaded.parameter_count() == miniature_params.parameter_count()

    def test_scalar_tensors_keep_rank(self, trained_miniature, tmp_path):
        """Test that 0-d buffers and Adam step counters are stored and restored as scalars."""
        scalars = [name for name, values in checkpoint_tensors(trained_miniature) if values.ndim == 0]
        assert any(name.endswith("num_batches_tracked") for name in scalars)
        assert "encoder.power.running_power" in scalars
        assert any(name.endswith(".step") for name in scalars)

        loaded = load_checkpoint(save_checkpoint(trained_miniature, tmp_path / "scalars.iccs"))
        state = loaded.model.state_dict()
        assert state["encoder.power.running_power"].shape == ()
        assert state["encoder.power.running_power"].item() == pytest.approx(
            trained_miniature.model.state_dict()["encoder.power.running_power"].item()
        )
        for moments in loaded.optimizer_state.values():
            assert moments["step"].shape == ()

    def test_tensor_order(self, trained_miniature):
        """Test that model tensors come first and the loss log last."""
        names = [name for name, _ in checkpoint_tensors(trained_miniature)]
        assert names[0] == next(iter(trained_miniature.model.state_dict()))
        assert names[-1] == "train.loss_log"
        assert any(name.startswith("optim.") for name in names)


@pytest.mark.unit
class TestCheckpointErrors:
    """Test cases for malformed checkpoints."""

    def test_missing_file(self, tmp_path):
        """Test that an absent file is a checkpoint error."""
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.iccs")

    def test_bad_magic(self, miniature_checkpoint, tmp_path):
        """Test that a tampered header is rejected."""

        def edit(data):
            data[0:4] = b"XXXX"
            return data

        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(_rewrite(miniature_checkpoint, tmp_path, edit))

    def test_version_mismatch(self, miniature_checkpoint, tmp_path):
        """Test that another format version is rejected."""

        def edit(data):
            data[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 2)
            return data

        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(_rewrite(miniature_checkpoint, tmp_path, edit))

    def test_truncated(self, miniature_checkpoint, tmp_path):
        """Test that a cut-off file is rejected."""
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(_rewrite(miniature_checkpoint, tmp_path, lambda data: data[:-3]))

    def test_architecture_mismatch(self, miniature_params, tmp_path):
        """Test that tensors that do not fit the descriptor are rejected."""
        other = Architecture(input_size=8, block_channels=(6,), residual_widths=(8, 4))
        path = save_checkpoint(miniature_params, tmp_path / "model.iccs")

        def edit(data):
            header = len(MAGIC) + 4
            length = struct.unpack("<I", data[header : header + 4])[0]
            descriptor = other.model_dump_json().encode("utf-8")
            return (
                data[:header]
                + struct.pack("<I", len(descriptor))
                + descriptor
                + data[header + 4 + length :]
            )

        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(_rewrite(path, tmp_path, edit))

    def test_invalid_descriptor(self, miniature_params, tmp_path):
        """Test that an unreadable architecture descriptor is rejected."""
        path = save_checkpoint(miniature_params, tmp_path / "model.iccs")

        def edit(data):
            header = len(MAGIC) + 4
            length = struct.unpack("<I", data[header : header + 4])[0]
            return data[: header + 4] + b"{" * length + data[header + 4 + length :]

        with pytest.raises(CheckpointError, match="architecture"):
            load_checkpoint(_rewrite(path, tmp_path, edit))

    def test_unexpected_tensor(self, miniature_params, tmp_path):
        """Test that an extra record is rejected."""
        path = save_checkpoint(miniature_params, tmp_path / "model.iccs")

        def edit(data):
            name = b"extra.weight"
            record = struct.pack("<I", len(name)) + name + struct.pack("<II", 1, 1)
            return data + record + struct.pack("<d", 1.0)

        with pytest.raises(CheckpointError, match="unexpected tensor"):
            load_checkpoint(_rewrite(path, tmp_path, edit))

    def test_duplicate_tensor(self, miniature_params, tmp_path):
        """Test that a repeated record is rejected."""
        path = save_checkpoint(miniature_params, tmp_path / "model.iccs")

        def edit(data):
            name = b"train.loss_log"
            return data + struct.pack("<I", len(name)) + name + struct.pack("<II", 1, 0)

        with pytest.raises(CheckpointError, match="duplicate"):
            load_checkpoint(_rewrite(path, tmp_path, edit))
