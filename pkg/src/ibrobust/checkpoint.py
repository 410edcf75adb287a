"""Versioned binary model container.

Layout (all integers little-endian):
  magic  4 bytes  b"IBAB"
  version u32
  spec_len u32, spec JSON bytes (NetworkSpec fields)
  count  u32
  per parameter: name_len u16, name utf-8, ndim u8, dims u32 each,
                 dtype u8 (0 = float32, 1 = float64), raw data bytes

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, TruncatedFile
from .nn import Model, NetworkSpec

MAGIC = b"IBAB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_model(model: Model, path) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    spec_bytes = json.dumps(model.spec.to_dict(), sort_keys=True).encode()
    blob += struct.pack("<I", len(spec_bytes))
    blob += spec_bytes
    names = sorted(model.params)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = model.params[name]
        nb = name.encode()
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += struct.pack("<B", _DTYPE_CODES[arr.dtype])
        blob += np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint truncated at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u(self, fmt: str) -> int:
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]


def load_model(path) -> Model:
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagic(f"bad checkpoint magic {magic!r}", offset=0)
    version = r.u("<I")
    if version != VERSION:
        raise BadMagic(f"unsupported checkpoint version {version}", offset=4)
    spec_len = r.u("<I")
    spec = NetworkSpec.from_dict(json.loads(r.take(spec_len).decode()))
    count = r.u("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u("<H")
        name = r.take(name_len).decode()
        ndim = r.u("<B")
        shape = tuple(r.u("<I") for _ in range(ndim))
        dtype = _DTYPES[r.u("<B")]
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        params[name] = np.ascontiguousarray(arr.astype(dtype.newbyteorder("=")))
    if r.pos != len(data):
        raise TruncatedFile("trailing bytes after checkpoint payload")
    dtype = next(iter(params.values())).dtype if params else np.float32
    return Model(spec, params, dtype=dtype)
