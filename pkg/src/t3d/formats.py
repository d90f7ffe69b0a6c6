"""On-disk formats: binary volume files, JSONL manifests, vocabulary files.

Volume file layout (all little-endian):

    magic      4 bytes   b"T3DV"
    version    u16       1
    dtype      u8        0 = float32 (only code defined)
    reserved   u8        0
    dims       3 x u32   W, H, S
    spacing    3 x f32   mm per voxel along (x, y, z)
    unit_range u8        0 or 1
    voxels     W*H*S f32 at offset(x, y, z) = x + y*W + z*W*H

Round trips are bit-exact: read(write(v)) equals v on every field.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, VolumeFormatError

import numpy as np

from .volume import Volume

MAGIC = b"T3DV"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0
_HEADER = struct.Struct("<4sHBB3I3fB")  # 33 bytes

PAD_TOKEN = "<pad>"
CLS_TOKEN = "<cls>"
UNK_TOKEN = "<unk>"
RESERVED_TOKENS = (PAD_TOKEN, CLS_TOKEN, UNK_TOKEN)


def write_volume(v: Volume, path) -> None:
    """Serialize a Volume; x varies fastest in the payload."""
    w, h, s = v.dims
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, DTYPE_FLOAT32, 0, w, h, s,
        np.float32(v.spacing[0]), np.float32(v.spacing[1]), np.float32(v.spacing[2]),
        1 if v.unit_range else 0,
    )
    payload = np.ascontiguousarray(v.voxels.transpose(2, 1, 0), dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_volume(path) -> Volume:
    """Deserialize a Volume, validating every header field."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError("header", f"file is {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, dtype, _reserved, w, h, s, sx, sy, sz, unit = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise VolumeFormatError("version", f"unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise VolumeFormatError("dtype", f"unknown dtype code {dtype}")
    if unit not in (0, 1):
        raise VolumeFormatError("unit_range", f"flag must be 0 or 1, got {unit}")
    n = w * h * s
    expected = _HEADER.size + 4 * n
    if len(raw) != expected:
        raise VolumeFormatError("voxels", f"expected {expected} bytes total, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=n)
    voxels = flat.reshape(s, h, w).transpose(2, 1, 0).copy()
    return Volume(voxels, (sx, sy, sz), unit_range=bool(unit))


@dataclass
class SampleRecord:
    """One manifest row pairing a volume file with its report and labels."""

    id: str
    volume_path: str
    report_text: str
    labels: dict[str, int]
    split: str

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train/val/test, got {self.split!r}")
        self.labels = {str(k): int(v) for k, v in self.labels.items()}
        if any(v not in (0, 1) for v in self.labels.values()):
            raise ConfigError(f"labels for {self.id} must be 0/1")


@dataclass
class Manifest:
    """Ordered collection of SampleRecords with unique ids."""

    records: list[SampleRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ConfigError(f"duplicate sample ids in manifest: {dupes}")

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def __len__(self) -> int:
        return len(self.records)


def write_manifest(manifest: Manifest, path) -> None:
    """One JSON object per line, UTF-8, keys in a fixed order."""
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            f.write(json.dumps({
                "id": r.id,
                "volume_path": r.volume_path,
                "report_text": r.report_text,
                "labels": r.labels,
                "split": r.split,
            }, sort_keys=True))
            f.write("\n")


def read_manifest(path) -> Manifest:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"manifest line {lineno + 1} is not valid JSON: {e}") from e
            records.append(SampleRecord(
                id=obj["id"], volume_path=obj["volume_path"],
                report_text=obj["report_text"], labels=obj["labels"],
                split=obj["split"],
            ))
    return Manifest(records)


def resolve_volume_path(manifest_path, record: SampleRecord) -> Path:
    """volume_path entries are relative to the manifest's directory."""
    p = Path(record.volume_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def write_vocab(tokens: list[str], path) -> None:
    """One token per line; line number is the token id; lines 0-2 reserved."""
    if len(tokens) < 3 or tuple(tokens[:3]) != RESERVED_TOKENS:
        raise ConfigError(f"vocab must start with reserved tokens {RESERVED_TOKENS}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(tokens))
        f.write("\n")


def read_vocab(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.strip()]
    if len(tokens) < 3 or tuple(tokens[:3]) != RESERVED_TOKENS:
        raise ConfigError(f"vocab file must start with reserved tokens {RESERVED_TOKENS}")
    return tokens
