"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CLIDCKPT" | u32 version | u32 len | header JSON (config, config_hash, meta)
    u32 n_params
    per param: u16 len | name utf-8 | u8 itemsize | u8 ndim | u32 dims... | payload
    u8 has_optimizer
    [u64 step | f64 lr, beta1, beta2, eps | m payloads | v payloads]

Payloads are raw little-endian IEEE floats (4 or 8 bytes). JSON is written
with sorted keys so that identical state gives identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .optim import AdamState

MAGIC = b"CLIDCKPT"
VERSION = 1
_FLOAT = {4: "<f4", 8: "<f8"}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_array(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype=_FLOAT[arr.dtype.itemsize]).tobytes())


def _read_array(buf, itemsize, shape):
    n = int(np.prod(shape)) if shape else 1
    raw = buf.read(n * itemsize)
    if len(raw) != n * itemsize:
        raise ValueError("checkpoint truncated")
    return np.frombuffer(raw, dtype=_FLOAT[itemsize]).reshape(shape).astype(_FLOAT[itemsize][1:], copy=True)


def dumps(named_arrays, config: dict, adam: AdamState | None = None, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    header = {"config": config, "config_hash": config_hash(config), "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(hb)))
    buf.write(hb)
    named_arrays = list(named_arrays)
    buf.write(struct.pack("<I", len(named_arrays)))
    for name, arr in named_arrays:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _write_array(buf, arr)
    if adam is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q4d", adam.step, adam.lr, adam.beta1, adam.beta2, adam.eps))
        for arr in adam.m:
            _write_array(buf, arr)
        for arr in adam.v:
            _write_array(buf, arr)
    return buf.getvalue()


def loads(blob: bytes):
    """Inverse of :func:`dumps`: returns ``(header, [(name, array)], AdamState | None)``."""
    buf = io.BytesIO(blob)
    if buf.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf.read(hlen).decode())
    if header["config_hash"] != config_hash(header["config"]):
        raise ValueError("checkpoint config hash mismatch")
    (n,) = struct.unpack("<I", buf.read(4))
    named = []
    for _ in range(n):
        (nl,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nl).decode()
        itemsize, ndim = struct.unpack("<BB", buf.read(2))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        named.append((name, _read_array(buf, itemsize, shape)))
    (has_opt,) = struct.unpack("<B", buf.read(1))
    adam = None
    if has_opt:
        step, lr, b1, b2, eps = struct.unpack("<Q4d", buf.read(40))
        adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
        adam.m = [_read_array(buf, a.dtype.itemsize, a.shape) for _, a in named]
        adam.v = [_read_array(buf, a.dtype.itemsize, a.shape) for _, a in named]
    if buf.read(1):
        raise ValueError("trailing bytes in checkpoint")
    return header, named, adam


def save(path, named_arrays, config, adam=None, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(named_arrays, config, adam, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
