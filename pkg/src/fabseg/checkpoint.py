"""Versioned named-array container and its binary file format.

Layout (little-endian, all lengths are unsigned 64-bit)::

    b"FABSEG01"
    u64 meta_len, meta_len bytes of UTF-8 JSON   {frozen_manifest, config, rng_state}
    u64 n_arrays
    n_arrays x record:
        u64 name_len, name (UTF-8)
        u64 dtype_len, numpy dtype string (e.g. "<f4")
        u64 ndim, ndim x u64 dims
        u64 nbytes, raw C-order bytes
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import CorruptCheckpoint, SchemaError

MAGIC = b"FABSEG01"
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)
    frozen_manifest: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    def validate(self):
        for name, arr in self.arrays.items():
            if np.issubdtype(arr.dtype, np.floating) and not np.isfinite(arr).all():
                raise SchemaError(f"array {name} has non-finite values")
        for prefix in self.frozen_manifest:
            if not any(name.startswith(prefix) for name in self.arrays):
                raise SchemaError(f"frozen prefix {prefix!r} matches no array")
        return self

    def names(self, prefix=""):
        return sorted(n for n in self.arrays if n.startswith(prefix))

    def merged(self, other):
        arrays = {**self.arrays, **other.arrays}
        manifest = sorted(set(self.frozen_manifest) | set(other.frozen_manifest))
        return Checkpoint(arrays, manifest, {**self.config, **other.config}, {**self.rng_state, **other.rng_state})

    @classmethod
    def from_module(cls, module, prefix, **kwargs):
        arrays = {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(arrays=arrays, **kwargs)

    def load_into(self, module, prefix):
        """Copy the ``prefix``-named arrays into ``module``; names and shapes must match exactly."""
        expected = module.state_dict()
        have = {n[len(prefix):]: a for n, a in self.arrays.items() if n.startswith(prefix)}
        missing = sorted(set(expected) - set(have))
        extra = sorted(set(have) - set(expected))
        if missing or extra:
            raise SchemaError(f"checkpoint/model mismatch under {prefix!r}: missing={missing[:5]} unexpected={extra[:5]}")
        state = {}
        for name, ref in expected.items():
            arr = have[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise SchemaError(f"{prefix}{name}: shape {arr.shape} does not fit {tuple(ref.shape)}")
            state[name] = torch.from_numpy(np.array(arr, copy=True)).to(ref.dtype)
        module.load_state_dict(state)
        return module


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    buf = io.BytesIO()
    buf.write(MAGIC)
    meta = json.dumps(
        {"frozen_manifest": ckpt.frozen_manifest, "config": ckpt.config, "rng_state": ckpt.rng_state},
        sort_keys=True,
    ).encode()
    buf.write(_U64.pack(len(meta)))
    buf.write(meta)
    buf.write(_U64.pack(len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        for blob in (name.encode(), arr.dtype.str.encode()):
            buf.write(_U64.pack(len(blob)))
            buf.write(blob)
        buf.write(_U64.pack(arr.ndim))
        for dim in arr.shape:
            buf.write(_U64.pack(dim))
        data = arr.tobytes()
        buf.write(_U64.pack(len(data)))
        buf.write(data)
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self):
        return _U64.unpack(self.take(8))[0]


def load_checkpoint(data: bytes) -> Checkpoint:
    if bytes(data[:8]) != MAGIC:
        raise CorruptCheckpoint("bad magic header")
    r = _Reader(data)
    r.take(8)
    try:
        meta = json.loads(bytes(r.take(r.u64())).decode())
        arrays = {}
        for _ in range(r.u64()):
            name = bytes(r.take(r.u64())).decode()
            dtype = np.dtype(bytes(r.take(r.u64())).decode())
            shape = tuple(r.u64() for _ in range(r.u64()))
            nbytes = r.u64()
            if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
                raise CorruptCheckpoint(f"{name}: byte count {nbytes} does not match shape {shape}")
            arrays[name] = np.frombuffer(bytes(r.take(nbytes)), dtype=dtype).reshape(shape).copy()
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc
    if r.pos != len(r.data):
        raise CorruptCheckpoint("trailing bytes after last record")
    for key in ("frozen_manifest", "config", "rng_state"):
        if key not in meta:
            raise SchemaError(f"checkpoint metadata lacks {key!r}")
    return Checkpoint(arrays, list(meta["frozen_manifest"]), meta["config"], meta["rng_state"]).validate()


def write_checkpoint(path, ckpt):
    Path(path).write_bytes(save_checkpoint(ckpt))


def read_checkpoint(path):
    return load_checkpoint(Path(path).read_bytes())
