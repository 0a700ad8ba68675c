"""Binary checkpoints: magic, version, config hash, then length-prefixed named arrays.

Layout (little-endian)::

    b"ECRLCKPT"  u32 version  u64 config_hash  u32 n_entries
    per entry: u32 name_len, name (utf-8), u8 dtype code, u32 ndim, u32 dims..., payload
    u32 crc32 of every byte after the fixed header
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ECRLCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQI")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointRecord:
    epoch: int
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    rng_state: dict = field(default_factory=dict)
    config_text: str = ""
    config_hash: int = 0
    extra: dict = field(default_factory=dict)


def _entries(rec):
    meta = {"epoch": rec.epoch, "adam_step": rec.adam_step, "rng_state": rec.rng_state, "extra": rec.extra}
    yield "__meta__", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype="u1")
    yield "__config__", np.frombuffer(rec.config_text.encode(), dtype="u1")
    for prefix, group in (("param/", rec.params), ("adam_m/", rec.adam_m), ("adam_v/", rec.adam_v)):
        for name in sorted(group):
            yield prefix + name, np.asarray(group[name])


def save_checkpoint(path, rec):
    body = bytearray()
    entries = list(_entries(rec))
    for name, arr in entries:
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" else arr.dtype
        if dt not in _CODES:
            raise CheckpointError(f"cannot store array {name!r} of dtype {arr.dtype}")
        raw = name.encode()
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<BI", _CODES[dt], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=dt).tobytes()
    head = _HEAD.pack(MAGIC, VERSION, rec.config_hash, len(entries))
    crc = zlib.crc32(bytes(body))
    Path(path).write_bytes(head + bytes(body) + struct.pack("<I", crc))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(buf)} bytes)")
    magic, version, chash, count = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    body = buf[_HEAD.size:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated)")
    arrays = {}
    off = 0
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode()
            off += n
            code, ndim = struct.unpack_from("<BI", body, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            if off + size > len(body):
                raise CheckpointError(f"{path}: entry {name!r} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
            off += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed entry table ({exc})") from None
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes after entry table")
    meta = json.loads(arrays.pop("__meta__").tobytes())
    config_text = arrays.pop("__config__").tobytes().decode()

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    return CheckpointRecord(meta["epoch"], group("param/"), group("adam_m/"), group("adam_v/"),
                            meta["adam_step"], meta["rng_state"], config_text, chash, meta.get("extra", {}))
