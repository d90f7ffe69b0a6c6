"""Volume file byte layout, round trips, manifest and vocab IO."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t3d.errors import ConfigError, VolumeFormatError
from t3d.formats import (
    Manifest,
    SampleRecord,
    read_manifest,
    read_vocab,
    read_volume,
    write_manifest,
    write_vocab,
    write_volume,
)
from t3d.volume import Volume


def roundtrip(tmp_path, v: Volume) -> Volume:
    path = tmp_path / "v.t3dv"
    write_volume(v, path)
    return read_volume(path)


class TestVolumeFile:
    def test_roundtrip_all_fields(self, tmp_path):
        rng = np.random.default_rng(0)
        v = Volume(rng.uniform(0, 1, (5, 7, 3)).astype(np.float32), (1.0, 1.5, 4.0), True)
        out = roundtrip(tmp_path, v)
        np.testing.assert_array_equal(out.voxels, v.voxels)
        assert out.spacing == v.spacing
        assert out.unit_range == v.unit_range

    def test_byte_layout_matches_offset_formula(self, tmp_path):
        # offset(x, y, z) = x + y*W + z*W*H, so for a 2x2x2 volume the
        # payload order is (0,0,0)(1,0,0)(0,1,0)(1,1,0)(0,0,1)(1,0,1)(0,1,1)(1,1,1)
        voxels = np.arange(8, dtype=np.float32).reshape(2, 2, 2)  # [x,y,z] = 4x+2y+z
        path = tmp_path / "v.t3dv"
        write_volume(Volume(voxels, (1, 1, 1)), path)
        raw = path.read_bytes()
        header_size = 33
        payload = np.frombuffer(raw, dtype="<f4", offset=header_size)
        w, h = 2, 2
        for x in range(2):
            for y in range(2):
                for z in range(2):
                    assert payload[x + y * w + z * w * h] == voxels[x, y, z]

    def test_header_fields(self, tmp_path):
        path = tmp_path / "v.t3dv"
        write_volume(Volume(np.zeros((3, 4, 5), dtype=np.float32), (1.0, 2.0, 4.0), True), path)
        raw = path.read_bytes()
        magic, version, dtype, _res, w, h, s = struct.unpack_from("<4sHBB3I", raw)
        assert magic == b"T3DV" and version == 1 and dtype == 0
        assert (w, h, s) == (3, 4, 5)
        assert len(raw) == 33 + 4 * 3 * 4 * 5

    def test_wrong_magic_names_field(self, tmp_path):
        path = tmp_path / "v.t3dv"
        write_volume(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError) as e:
            read_volume(path)
        assert e.value.field == "magic"

    def test_truncated_payload_names_field(self, tmp_path):
        path = tmp_path / "v.t3dv"
        write_volume(Volume(np.zeros((4, 4, 4)), (1, 1, 1)), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(VolumeFormatError) as e:
            read_volume(path)
        assert e.value.field == "voxels"

    def test_unknown_dtype_code_rejected(self, tmp_path):
        path = tmp_path / "v.t3dv"
        write_volume(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), path)
        raw = bytearray(path.read_bytes())
        raw[6] = 7  # dtype code byte
        path.write_bytes(bytes(raw))
        with pytest.raises(VolumeFormatError) as e:
            read_volume(path)
        assert e.value.field == "dtype"

    @given(seed=st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_randomized_roundtrip_bit_exact(self, tmp_path_factory, seed):
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in rng.integers(1, 9, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.1, 5.0, size=3))
        v = Volume(rng.uniform(0, 1, dims).astype(np.float32), spacing,
                   unit_range=bool(rng.integers(0, 2)))
        out = roundtrip(tmp_path_factory.mktemp("rt"), v)
        assert np.array_equal(out.voxels, v.voxels)
        assert out.spacing == v.spacing and out.unit_range == v.unit_range


class TestManifest:
    def record(self, i, split="train"):
        return SampleRecord(id=f"s{i}", volume_path=f"volumes/s{i}.t3dv",
                            report_text="no findings", labels={"sphere": 0}, split=split)

    def test_roundtrip(self, tmp_path):
        m = Manifest([self.record(0), self.record(1, "test")])
        path = tmp_path / "manifest.jsonl"
        write_manifest(m, path)
        out = read_manifest(path)
        assert len(out) == 2
        assert out.records[1].split == "test"
        assert out.records[0].labels == {"sphere": 0}

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ConfigError):
            Manifest([self.record(0), self.record(0)])

    def test_bad_split_rejected(self):
        with pytest.raises(ConfigError):
            self.record(0, split="holdout")

    def test_rereading_written_bytes_is_stable(self, tmp_path):
        m = Manifest([self.record(i) for i in range(5)])
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_manifest(m, p1)
        write_manifest(read_manifest(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestVocabFile:
    def test_roundtrip_and_reserved_lines(self, tmp_path):
        tokens = ["<pad>", "<cls>", "<unk>", "sphere", "bright"]
        path = tmp_path / "vocab.txt"
        write_vocab(tokens, path)
        assert read_vocab(path) == tokens
        assert path.read_text().splitlines()[0] == "<pad>"

    def test_missing_reserved_rejected(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("sphere\nbox\n")
        with pytest.raises(ConfigError):
            read_vocab(path)
