import struct

import numpy as np
import pytest

from bcrisk.errors import FormatError, ValidationError
from bcrisk.store import MAGIC, read_store, write_store
from bcrisk.tiling import EmbeddingBag


def make_bag(pid, n, dim, seed):
    rng = np.random.default_rng(seed)
    return EmbeddingBag(
        patient_id=pid,
        tiles=rng.normal(size=(n, dim)).astype(np.float32),
        provenance=f"synthetic:{dim}",
    )


class TestRoundTrip:
    def test_three_bags_round_trip_to_the_last_bit(self, tmp_path):
        bags = [make_bag(f"P{i}", 3 + i, 6, seed=i) for i in range(3)]
        path = tmp_path / "store.bin"
        write_store(bags, path)
        loaded = read_store(path)
        assert [b.patient_id for b in loaded] == ["P0", "P1", "P2"]
        for orig, back in zip(bags, loaded):
            assert back.provenance == orig.provenance
            np.testing.assert_array_equal(back.tiles, orig.tiles)

    def test_write_read_write_is_byte_identical(self, tmp_path):
        bags = [make_bag(f"P{i}", 4, 5, seed=i) for i in range(2)]
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        write_store(bags, p1)
        write_store(read_store(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_store_round_trips(self, tmp_path):
        path = tmp_path / "empty.bin"
        write_store([], path)
        assert read_store(path) == []

    def test_mixed_dims_rejected_on_write(self, tmp_path):
        with pytest.raises(ValidationError):
            write_store([make_bag("P0", 2, 4, 0), make_bag("P1", 2, 8, 1)], tmp_path / "x")


class TestFormatErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "store.bin"
        write_store([make_bag("P0", 2, 4, 0)], path)
        data = bytearray(path.read_bytes())
        data[:8] = b"NOTMAGIC"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="magic"):
            read_store(path)

    def test_truncated_payload_names_byte_offset(self, tmp_path):
        path = tmp_path / "store.bin"
        write_store([make_bag("P0", 4, 4, 0)], path)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(FormatError, match="byte offset"):
            read_store(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "store.bin"
        write_store([make_bag("P0", 2, 4, 0)], path)
        data = bytearray(path.read_bytes())
        struct.pack_into("<I", data, 8, 99)
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            read_store(path)


class TestGoldenLayout:
    """Freeze the documented header layout byte for byte."""

    def test_header_bytes_match_documented_layout(self, tmp_path):
        tiles = np.array([[1.0, 2.0], [3.0, 4.0]], dtype="<f4")
        bag = EmbeddingBag(patient_id="AB", tiles=tiles, provenance="synthetic:2")
        path = tmp_path / "golden.bin"
        write_store([bag], path)
        expected = (
            MAGIC
            + struct.pack("<III", 1, 2, 1)  # version, dim, n_bags
            + struct.pack("<H", 2)
            + b"AB"
            + struct.pack("<H", 11)
            + b"synthetic:2"
            + struct.pack("<I", 2)  # n_tiles
            + tiles.tobytes()
        )
        assert path.read_bytes() == expected
