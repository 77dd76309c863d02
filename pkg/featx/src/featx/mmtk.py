"""MMTK token bank writer and reader.

The extraction side and the graph-completion engine share only this file
layout, so it is restated here in full rather than imported. Everything is
little-endian:

    header   "<4sHBBIQ"  magic b"MMTK", version u16 = 1, modality u8
                         (1 = visual, 2 = textual), reserved u8 = 0,
                         token dim u32, entity count u64
    entity   "<QI"       entity id u64, token count u32, then
                         count * dim float32 values, row-major

Entities are written in ascending id order so a rerun over the same inputs
produces the same bytes.
"""

import struct

import numpy as np

from .errors import ConfigError, DataError

MAGIC = b"MMTK"
VERSION = 1
MODALITY_CODES = {"visual": 1, "textual": 2}
_CODE_NAMES = {code: name for name, code in MODALITY_CODES.items()}

_HEADER = struct.Struct("<4sHBBIQ")
_ENTITY = struct.Struct("<QI")


def write_bank(path, modality, dim, sequences):
    """Write ``sequences`` (entity id -> (count, dim) array) as one bank."""
    if modality not in MODALITY_CODES:
        raise ConfigError(f"unknown modality {modality!r}")
    if dim < 1:
        raise ConfigError(f"token dim must be positive, got {dim}")
    parts = [_HEADER.pack(MAGIC, VERSION, MODALITY_CODES[modality], 0,
                          dim, len(sequences))]
    for eid in sorted(sequences):
        arr = np.ascontiguousarray(sequences[eid], dtype="<f4")
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise ConfigError(
                f"entity {eid}: token matrix {arr.shape} does not match dim {dim}")
        if arr.shape[0] < 1:
            # the engine expects at least one token per stored entity;
            # entities with nothing to store are skipped, not written empty
            raise ConfigError(f"entity {eid}: empty token matrix")
        if eid < 0:
            raise ConfigError(f"negative entity id {eid}")
        parts.append(_ENTITY.pack(eid, arr.shape[0]))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_bank(path):
    """Read a bank back as (modality name, dim, {entity id: array}).

    This is a convenience for tests and verification; the engine's own
    loader is the authority on acceptance.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: shorter than a bank header")
    magic, version, code, _reserved, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataError(f"{path}: version {version}, expected {VERSION}")
    if code not in _CODE_NAMES:
        raise DataError(f"{path}: unknown modality byte {code}")
    offset = _HEADER.size
    sequences = {}
    for _ in range(count):
        if offset + _ENTITY.size > len(blob):
            raise DataError(f"{path}: truncated entity record")
        eid, n = _ENTITY.unpack_from(blob, offset)
        offset += _ENTITY.size
        end = offset + n * dim * 4
        if end > len(blob):
            raise DataError(f"{path}: truncated token data for entity {eid}")
        arr = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=offset)
        sequences[eid] = arr.reshape(n, dim).copy()
        offset = end
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return _CODE_NAMES[code], dim, sequences
