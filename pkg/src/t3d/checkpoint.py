"""Single-file checkpoint container.

Layout (little-endian):

    magic       4 bytes  b"T3DK"
    version     u16      1
    reserved    u16      0
    header_len  u64      byte length of the JSON header
    header      UTF-8 canonical JSON (sorted keys, no whitespace)
    payload     raw little-endian float64 tensor data

The header carries the full train config, its fingerprint, step/epoch
counters, the bit-generator state, the optimizer step count, and a tensor
manifest: [name, kind, dtype, shape, offset, nbytes] with offsets into the
payload. Tensors are laid out sorted by (kind, name), and the JSON is
canonical, so save -> load -> save is byte-identical. Writes go through a
temp file and os.replace, so a checkpoint on disk is never half-written.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import RefuseToResumeError, VolumeFormatError

MAGIC = b"T3DK"
VERSION = 1
_PREAMBLE = struct.Struct("<4sHHQ")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_fingerprint(cfg_dict: dict) -> str:
    return hashlib.sha256(canonical_json(cfg_dict).encode("utf-8")).hexdigest()


@dataclass
class CheckpointPayload:
    """Everything a resumed run needs, exactly as stored."""

    config: dict
    fingerprint: str
    step: int
    epoch: int
    rng_state: dict
    opt_t: int
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]


def save_checkpoint(path, config: dict, step: int, epoch: int, rng_state: dict,
                    opt_t: int, params: dict[str, Tensor],
                    opt_m: dict[str, np.ndarray], opt_v: dict[str, np.ndarray]) -> str:
    """Atomically write the container; returns the fingerprint."""
    groups = [("param", {k: v.data for k, v in params.items()}),
              ("m", opt_m), ("v", opt_v)]
    manifest = []
    blobs = []
    offset = 0
    for kind, tensors in groups:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            manifest.append({
                "name": name, "kind": kind, "dtype": "<f8",
                "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes,
            })
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    fingerprint = config_fingerprint(config)
    header = canonical_json({
        "config": config,
        "fingerprint": fingerprint,
        "step": int(step),
        "epoch": int(epoch),
        "rng": rng_state,
        "opt_t": int(opt_t),
        "tensors": manifest,
    }).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, 0, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)
    return fingerprint


def load_checkpoint(path, expect_fingerprint: str | None = None) -> CheckpointPayload:
    """Read and validate a container; optionally enforce a config fingerprint."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREAMBLE.size:
        raise VolumeFormatError("header", "checkpoint file too short")
    magic, version, _reserved, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise VolumeFormatError("version", f"unsupported checkpoint version {version}")
    header_end = _PREAMBLE.size + header_len
    if len(raw) < header_end:
        raise VolumeFormatError("header", "truncated checkpoint header")
    header = json.loads(raw[_PREAMBLE.size:header_end].decode("utf-8"))
    stored = header["fingerprint"]
    if stored != config_fingerprint(header["config"]):
        raise VolumeFormatError("fingerprint", "fingerprint does not match stored config")
    if expect_fingerprint is not None and stored != expect_fingerprint:
        raise RefuseToResumeError(
            f"checkpoint fingerprint {stored[:12]}... does not match requested config "
            f"{expect_fingerprint[:12]}...")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "m": {}, "v": {}}
    payload = raw[header_end:]
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise VolumeFormatError("tensors", f"payload truncated at {entry['name']}")
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=nbytes // 8,
                            offset=start).reshape(entry["shape"]).copy()
        groups[entry["kind"]][entry["name"]] = arr
    return CheckpointPayload(
        config=header["config"], fingerprint=stored, step=header["step"],
        epoch=header["epoch"], rng_state=header["rng"], opt_t=header["opt_t"],
        params=groups["param"], opt_m=groups["m"], opt_v=groups["v"],
    )


def checkpoint_hash(path) -> str:
    """Content hash of a checkpoint file, used to stamp evaluation reports."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
