"""Versioned binary checkpoints: parameters, optimizer moments, and the
resolved configuration text that produced them.

Layout (little-endian): magic "TSCK", version u16, sha256 of the config
text (32 bytes), config length u32 + UTF-8 bytes, epoch u32, tensor count
u32, then per tensor: name (u16 length + UTF-8), rank u8, dims u32 each,
float32 payload. A trailing u8 flags optimizer state: step u64 followed by
the m and v moment arrays in tensor order. Parameters are stored exactly
(float32 in, float32 out), so reloaded models evaluate bit-identically.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import CheckpointError, CheckpointVersionError

MAGIC = b"TSCK"
VERSION = 1


def _pack_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        out = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return out[0] if len(out) == 1 else out

    def array(self):
        ndim = self.unpack("B")
        shape = tuple(self.unpack("I") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(self.take(count * 4), dtype="<f4")
        return flat.reshape(shape).copy()


def save(path, params, epoch, config_text, adam_state=None):
    """params: ordered dict name -> Tensor (saved in iteration order)."""
    cfg_bytes = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(hashlib.sha256(cfg_bytes).digest())
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", epoch))
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            _pack_array(fh, tensor.data)
        if adam_state is None:
            fh.write(struct.pack("<B", 0))
        else:
            step, ms, vs = adam_state
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", step))
            for m in ms:
                _pack_array(fh, m)
            for v in vs:
                _pack_array(fh, v)


def load(path):
    """-> dict with config_text, config_sha (hex), epoch, tensors, adam."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = rd.unpack("H")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this build reads {VERSION}")
    digest = rd.take(32)
    cfg_len = rd.unpack("I")
    cfg_bytes = rd.take(cfg_len)
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise CheckpointError(f"{path}: embedded config does not match its hash")
    epoch = rd.unpack("I")
    count = rd.unpack("I")
    tensors = {}
    order = []
    for _ in range(count):
        name = rd.take(rd.unpack("H")).decode("utf-8")
        tensors[name] = rd.array()
        order.append(name)
    adam = None
    if rd.unpack("B"):
        step = rd.unpack("Q")
        ms = [rd.array() for _ in range(count)]
        vs = [rd.array() for _ in range(count)]
        adam = (step, ms, vs)
    return {
        "config_text": cfg_bytes.decode("utf-8"),
        "config_sha": digest.hex(),
        "epoch": epoch,
        "tensors": tensors,
        "order": order,
        "adam": adam,
    }


def restore_model(model, loaded):
    """Copy checkpoint tensors into an already-built model, shape-checked."""
    tensors = loaded["tensors"]
    missing = sorted(set(model.params) - set(tensors))
    extra = sorted(set(tensors) - set(model.params))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint/model parameter mismatch (missing {missing}, extra {extra})")
    for name, tensor in model.params.items():
        arr = tensors[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
        tensor.data = arr.astype(np.float32, copy=True)
