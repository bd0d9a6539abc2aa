"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HFBM"                      magic
    u16                          format version
    u32 + bytes                  config block, UTF-8 "key=value" lines
    repeated until end of file:
        u16 + bytes              tensor name, UTF-8
        u8                       rank
        u32 * rank               extents
        f32 * prod(extents)      values, row-major

Config values are JSON encoded, so ``load`` recovers ints, floats and lists
exactly. Parameters and batch-norm running statistics are both stored as
tensor records.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .mae import HfbriMae, ModelConfig

MAGIC = b"HFBM"
VERSION = 1


def save_checkpoint(path, model, step=0, extra=None):
    cfg = model.cfg
    meta = dict(cfg.to_dict())
    meta["step"] = int(step)
    meta["fingerprint"] = cfg.fingerprint()
    for k, v in (extra or {}).items():
        meta[f"extra.{k}"] = v
    text = "\n".join(f"{k}={json.dumps(v)}" for k, v in meta.items()).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    out += struct.pack("<I", len(text)) + text
    for name, arr in model.state_dict().items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode()
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)
    return path


def read_checkpoint(path):
    """Parse a checkpoint file into (meta dict, {name: float32 array})."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise DataError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (n_text,) = struct.unpack("<I", take(4))
    meta = {}
    for line in take(n_text).decode().splitlines():
        key, _, value = line.partition("=")
        meta[key] = json.loads(value)
    tensors = {}
    while pos < len(buf):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode()
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return meta, tensors


def config_from_meta(meta):
    names = set(ModelConfig.__dataclass_fields__)
    return ModelConfig.from_dict({k: v for k, v in meta.items() if k in names})


def load_checkpoint(path, expect=None):
    """Rebuild the model stored at ``path``; returns (model, meta).

    With ``expect`` (a ModelConfig), a differing architecture raises
    ConfigError listing the fields that differ.
    """
    meta, tensors = read_checkpoint(path)
    cfg = config_from_meta(meta)
    if expect is not None:
        check_compatible(expect, cfg)
    model = HfbriMae(cfg)
    model.load_state_dict(tensors)
    return model, meta


def check_compatible(expected, found):
    a, b = expected.to_dict(), found.to_dict()
    ignore = {"mask_ratio", "init_seed"}
    diff = sorted(k for k in a if k not in ignore and a[k] != b.get(k))
    if diff:
        detail = ", ".join(f"{k}: config={a[k]!r} checkpoint={b.get(k)!r}" for k in diff)
        raise ConfigError(f"checkpoint does not match config ({detail})")
