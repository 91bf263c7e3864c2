"""Binary tensor container (``.catw``) and model checkpoint save/load.

Layout, all integers little-endian::

    magic        4 bytes  b"CATW"
    version      u32
    config_len   u64, then config_len bytes of UTF-8 JSON
    count        u64
    per tensor:
        name_len u64, then name_len bytes of UTF-8
        dtype    u8   (0 = float32, 1 = float64)
        rank     u64, then rank x u64 dims
        data     prod(dims) little-endian elements, row-major
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .backbone import Model, build
from .config import CatConfig
from .errors import CheckpointFormatError, ConfigError

MAGIC = b"CATW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Container:
    config_json: str = "{}"
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return json.loads(self.config_json)


def encode(c: Container) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = c.config_json.encode("utf-8")
    buf.write(struct.pack("<Q", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", len(c.tensors)))
    for name, arr in c.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw_name)))
        buf.write(raw_name)
        code = _CODES[arr.dtype]
        buf.write(struct.pack("<BQ", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Container:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version} (expected {VERSION})")
    (cfg_len,) = r.unpack("<Q", "config length")
    try:
        cfg = r.take(cfg_len, "config").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"config is not valid UTF-8: {exc}") from exc
    (count,) = r.unpack("<Q", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<Q", f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"tensor {i} name is not valid UTF-8") from exc
        code, rank = r.unpack("<BQ", f"header of {name!r}")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"tensor {name!r} has unknown dtype code {code}")
        if rank > 64:
            raise CheckpointFormatError(f"tensor {name!r} has implausible rank {rank}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=object)) * dt.itemsize
        raw = r.take(nbytes, f"data of {name!r}")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return Container(cfg, tensors)


def write_container(path, c: Container) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(c))
    os.replace(tmp, path)


def read_container(path) -> Container:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_checkpoint(m: Model, path) -> None:
    write_container(path, Container(m.config.to_json(), m.state_dict()))


def load_state(m: Model, tensors: dict[str, np.ndarray]) -> Model:
    """Copy named arrays into ``m``; every name and shape must match."""
    params = m.params
    for name, arr in tensors.items():
        if name not in params:
            raise CheckpointFormatError(f"unknown parameter {name!r} in checkpoint")
        if params[name].shape != arr.shape:
            raise CheckpointFormatError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {params[name].shape}")
    missing = [k for k in params if k not in tensors]
    if missing:
        raise CheckpointFormatError(f"checkpoint is missing parameter {missing[0]!r}")
    for name, arr in tensors.items():
        params[name].data = np.array(arr, dtype=arr.dtype)
    return m


def load_checkpoint(path, config: CatConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint.

    With ``config`` the tensors are loaded into that architecture instead of
    the one recorded in the file, and any mismatch raises.
    """
    c = read_container(path)
    if config is None:
        try:
            config = CatConfig.from_dict(c.config)
        except (ConfigError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"embedded config is invalid: {exc}") from exc
    dtype = next(iter(c.tensors.values())).dtype if c.tensors else np.float32
    return load_state(build(config, seed=0, dtype=dtype), c.tensors)
