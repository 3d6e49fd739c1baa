"""Tests for binary parameter and index files."""

import numpy as np
import pytest

from speech_linker.storage import (
    StorageError,
    read_index_file,
    read_param_file,
    write_index_file,
    write_param_file,
)


class TestParamFile:
    """Tests for write_param_file and read_param_file."""

    def test_bit_exact(self, tmp_path):
        """Test that arrays and metadata come back unchanged."""
        rng = np.random.default_rng(0)
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
        path = tmp_path / "p.bin"

        write_param_file(path, "ner", {"seed": 3, "tags": ["O", "B", "I"]}, arrays)
        meta, loaded = read_param_file(path, "ner")

        assert meta == {"seed": 3, "tags": ["O", "B", "I"]}
        assert list(loaded) == ["a", "b", "s"]
        for name, array in arrays.items():
            np.testing.assert_array_equal(loaded[name], array)
            assert loaded[name].shape == array.shape

    def test_loaded_arrays_writable(self, tmp_path):
        """Test that loaded arrays can be trained further."""
        path = tmp_path / "p.bin"
        write_param_file(path, "ner", {}, {"w": np.zeros(2)})

        _, loaded = read_param_file(path, "ner")
        loaded["w"] += 1.0

        np.testing.assert_array_equal(loaded["w"], [1.0, 1.0])

    def test_wrong_kind(self, tmp_path):
        """Test that reading with the wrong kind raises StorageError."""
        path = tmp_path / "p.bin"
        write_param_file(path, "encoder", {}, {"w": np.zeros(1)})

        with pytest.raises(StorageError) as exc_info:
            read_param_file(path, "ranker")

        assert "encoder" in str(exc_info.value)

    def test_wrong_magic(self, tmp_path):
        """Test that a foreign file is rejected."""
        path = tmp_path / "p.bin"
        path.write_bytes(b"NOPE" + bytes(16))

        with pytest.raises(StorageError):
            read_param_file(path, "encoder")

    def test_truncated(self, tmp_path):
        """Test that a truncated file raises StorageError."""
        path = tmp_path / "p.bin"
        write_param_file(path, "encoder", {}, {"w": np.zeros(100)})
        path.write_bytes(path.read_bytes()[:-8])

        with pytest.raises(StorageError):
            read_param_file(path, "encoder")

    def test_missing(self, tmp_path):
        """Test that a missing file raises StorageError."""
        with pytest.raises(StorageError):
            read_param_file(tmp_path / "absent.bin", "encoder")


class TestIndexFile:
    """Tests for write_index_file and read_index_file."""

    def test_round_trip(self, tmp_path):
        """Test ids, matrix and fingerprint survive a write/read."""
        matrix = np.random.default_rng(1).normal(size=(3, 2))
        path = tmp_path / "i.bin"

        write_index_file(path, ["Q1", "Q2", "Zoë"], matrix, "abc123")
        ids, loaded, fingerprint = read_index_file(path)

        assert ids == ["Q1", "Q2", "Zoë"]
        np.testing.assert_array_equal(loaded, matrix)
        assert fingerprint == "abc123"

    def test_shape_mismatch(self, tmp_path):
        """Test that id count and matrix rows must agree."""
        with pytest.raises(StorageError):
            write_index_file(tmp_path / "i.bin", ["Q1"], np.zeros((2, 2)), "x")
