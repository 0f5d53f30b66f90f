"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"VOICYCKP"            magic, 8 bytes
    u32 version            currently 1
    u32 n, bytes[n]        JSON metadata (model config, hyperparameters, ...)
    u32 count              parameter records follow
        u16 n, bytes[n]    path (utf-8)
        u8                 trainable flag
        tensor
    u8 has_optimizer
        f64 lr, beta1, beta2, eps; u64 step; u32 count
        per entry: u16 n, bytes[n] path; tensor m; tensor v
    bytes[32]              sha256 of everything above

    tensor := u8 n, bytes[n] dtype ("<f8" / "<f4"); u8 ndim; u64[ndim] shape;
              raw little-endian values
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .engine import Parameters
from .optim import AdamState

MAGIC = b"VOICYCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_bytes(buf, data: bytes, fmt="<I"):
    buf.write(struct.pack(fmt, len(data)))
    buf.write(data)


def _write_tensor(buf, arr: np.ndarray):
    dtype = arr.dtype.newbyteorder("<")
    _write_bytes(buf, dtype.str.encode(), "<B")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def bytes(self, fmt="<I") -> bytes:
        (n,) = self.unpack(fmt)
        return self.take(n)

    def tensor(self) -> np.ndarray:
        dtype = np.dtype(self.bytes("<B").decode())
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}Q")
        count = int(np.prod(shape)) if ndim else 1
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def dumps(params: Parameters, optimizer: AdamState | None = None, metadata: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_bytes(buf, json.dumps(metadata or {}, sort_keys=True).encode())
    buf.write(struct.pack("<I", len(params)))
    for path, value in params.items():
        _write_bytes(buf, path.encode(), "<H")
        buf.write(struct.pack("<B", int(params.is_trainable(path))))
        _write_tensor(buf, value)
    buf.write(struct.pack("<B", optimizer is not None))
    if optimizer is not None:
        o = optimizer
        buf.write(struct.pack("<4dQ", o.lr, o.beta1, o.beta2, o.eps, o.step))
        buf.write(struct.pack("<I", len(o.m)))
        for path in o.m:
            _write_bytes(buf, path.encode(), "<H")
            _write_tensor(buf, o.m[path])
            _write_tensor(buf, o.v[path])
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> tuple[Parameters, AdamState | None, dict]:
    if len(data) < len(MAGIC) + 36 or not data.startswith(MAGIC):
        raise CheckpointError("not a voicy checkpoint (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt file)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    metadata = json.loads(r.bytes().decode())
    (count,) = r.unpack("<I")
    values, frozen = {}, []
    for _ in range(count):
        path = r.bytes("<H").decode()
        (trainable,) = r.unpack("<B")
        values[path] = r.tensor()
        if not trainable:
            frozen.append(path)
    params = Parameters(values, frozen)
    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt:
        lr, b1, b2, eps, step = r.unpack("<4dQ")
        (n,) = r.unpack("<I")
        m, v = {}, {}
        for _ in range(n):
            path = r.bytes("<H").decode()
            m[path] = r.tensor()
            v[path] = r.tensor()
        optimizer = AdamState(lr, b1, b2, eps, step, m, v)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return params, optimizer, metadata


def save(path, params: Parameters, optimizer: AdamState | None = None, metadata: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(params, optimizer, metadata))
    tmp.replace(path)


def load(path) -> tuple[Parameters, AdamState | None, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
