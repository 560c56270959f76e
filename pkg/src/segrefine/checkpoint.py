"""DBCK checkpoint files.

Layout (little-endian throughout)::

    magic "DBCK" | version u16 | config digest (32 raw bytes) | epoch u32
    tensor table      u32 count, then entries
    optimizer         step u64, lr/beta1/beta2/eps f64, u32 count, entries (m then v per name)
    rng state         u32 length + UTF-8 JSON
    metadata          u32 length + UTF-8 JSON
    label table       u32 count, then entries

A tensor entry is ``u16 name length | UTF-8 name | u8 dtype code |
u8 ndim | ndim x u32 dims | raw row-major payload``. Dtype codes are those of
the SEGD format plus 3 for float64.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FormatError
from .tensor import AdamState

MAGIC = b"DBCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("float64"): 3}


@dataclass
class Checkpoint:
    config_digest: str
    epoch: int
    params: dict[str, np.ndarray]
    adam: AdamState
    rng_state: dict
    meta: dict = field(default_factory=dict)
    labels: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"checkpoint cannot store dtype {arr.dtype} ({name})")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ck: Checkpoint) -> bytes:
    digest = bytes.fromhex(ck.config_digest) if ck.config_digest else bytes(32)
    if len(digest) != 32:
        raise ValueError("config digest must be a 32-byte sha256 hex string")
    parts = [MAGIC, struct.pack("<H", VERSION), digest, struct.pack("<I", ck.epoch)]
    parts.append(struct.pack("<I", len(ck.params)))
    parts += [_pack_entry(n, a) for n, a in ck.params.items()]
    a = ck.adam
    parts.append(struct.pack("<Q4d", a.step, a.lr, a.beta1, a.beta2, a.eps))
    names = sorted(a.m)
    parts.append(struct.pack("<I", len(names)))
    for n in names:
        parts.append(_pack_entry(n, a.m[n]))
        parts.append(_pack_entry(n, a.v[n]))
    parts.append(_pack_json(ck.rng_state))
    parts.append(_pack_json(ck.meta))
    parts.append(struct.pack("<I", len(ck.labels)))
    parts += [_pack_entry(n, ck.labels[n]) for n in sorted(ck.labels)]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} more bytes", self.pos, self.path)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entry(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        at = self.pos
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", at, self.path)
        dims = self.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64))
        raw = self.take(count * dtype.itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        return name, arr

    def json(self):
        (n,) = self.unpack("<I")
        at = self.pos
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise FormatError("corrupt JSON block", at, self.path) from None


def decode_checkpoint(buf: bytes, path=None) -> Checkpoint:
    r = _Reader(buf, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0, path)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    digest = r.take(32)
    (epoch,) = r.unpack("<I")
    (n_params,) = r.unpack("<I")
    params = dict(r.entry() for _ in range(n_params))
    step, lr, b1, b2, eps = r.unpack("<Q4d")
    adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
    (n_moments,) = r.unpack("<I")
    for _ in range(n_moments):
        name, m = r.entry()
        name_v, v = r.entry()
        if name_v != name:
            raise FormatError(f"optimizer moments out of order: {name!r} vs {name_v!r}", r.pos, path)
        adam.m[name], adam.v[name] = m, v
    rng_state = r.json()
    meta = r.json()
    (n_labels,) = r.unpack("<I")
    labels = dict(r.entry() for _ in range(n_labels))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", r.pos, path)
    hexdigest = "" if digest == bytes(32) else digest.hex()
    return Checkpoint(hexdigest, epoch, params, adam, rng_state, meta, labels)


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)


def restore_params(net, params: dict[str, np.ndarray]) -> None:
    """Copy checkpointed arrays into ``net``; nothing is written unless all match."""
    own = net.named_parameters()
    missing = sorted(set(own) - set(params))
    extra = sorted(set(params) - set(own))
    if missing or extra:
        raise ValueError(f"checkpoint does not match model: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in own.items():
        if params[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint {params[name].shape} vs model {p.shape}")
    for name, p in own.items():
        p.data = params[name].astype(p.data.dtype, copy=True)
        p.grad = None
