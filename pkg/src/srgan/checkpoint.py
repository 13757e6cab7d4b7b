"""Binary checkpoint container.

Little-endian layout::

    b"SRCK"  u32 version (=1)  u32 entry_count
    entry_count x { u32 name_len, name (UTF-8), u8 dtype, u8 ndim,
                    ndim x u64 dim, raw payload }
    u64 step
    u32 config_len, config (UTF-8 JSON, sorted keys)

dtype codes: 1 = float32, 2 = float64.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, IoError

MAGIC = b"SRCK"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_FOR = {np.dtype("float32"): 1, np.dtype("float64"): 2}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)
    version: int = VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = CODE_FOR.get(arr.dtype)
        if code is None:
            raise InvalidArgument(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    blob = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<QI", ckpt.step, len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint in {section} (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    if rd.take(4, "header") != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    version, count = rd.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for i in range(count):
        section = f"entry {i}"
        (name_len,) = rd.unpack("<I", section + " name length")
        try:
            name = rd.take(name_len, section + " name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{section}: name is not UTF-8") from exc
        section = f"entry {i} ({name})"
        code, ndim = rd.unpack("<BB", section + " dtype")
        if code not in DTYPE_CODES:
            raise FormatError(f"{section}: unknown dtype code {code}")
        dims = rd.unpack(f"<{ndim}Q", section + " dims")
        dtype = DTYPE_CODES[code]
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=object))
        payload = rd.take(nbytes, section + " payload")
        if name in tensors:
            raise FormatError(f"{section}: duplicate tensor name")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    step, cfg_len = rd.unpack("<QI", "step/config length")
    try:
        config = json.loads(rd.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"config blob is not valid JSON: {exc}") from exc
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after config")
    if not isinstance(config, dict):
        raise FormatError("config blob must be a JSON object")
    return Checkpoint(tensors, step, config, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    data = encode_checkpoint(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)
