"""Binary embedding store: all tile vectors for a cohort in one file.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic  b"BCREMB01"
    8       4     version     uint32 (currently 1)
    12      4     dim         uint32 (one dim per store; 0 allowed when empty)
    16      4     n_bags      uint32
    then, per bag, a directory entry:
            2     len(patient_id)   uint16
            var   patient_id        UTF-8
            2     len(provenance)   uint16
            var   provenance        UTF-8
            4     n_tiles           uint32
    then the payload: for each bag in directory order,
            n_tiles * dim float32 values, little-endian, row-major.

Reads are strict: a wrong magic, an unknown version, or a payload shorter
than the directory promises raises FormatError naming the byte offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .tiling import EmbeddingBag

MAGIC = b"BCREMB01"
VERSION = 1


def write_store(bags: list[EmbeddingBag], path: str | Path) -> None:
    """Serialize bags (all sharing one dim) to ``path``."""
    dim = bags[0].dim if bags else 0
    for b in bags:
        if b.dim != dim:
            raise ValidationError(f"store requires a single dim; got {dim} and {b.dim}")
    parts = [MAGIC, struct.pack("<III", VERSION, dim, len(bags))]
    for b in bags:
        pid = b.patient_id.encode("utf-8")
        prov = b.provenance.encode("utf-8")
        parts.append(struct.pack("<H", len(pid)))
        parts.append(pid)
        parts.append(struct.pack("<H", len(prov)))
        parts.append(prov)
        parts.append(struct.pack("<I", b.n_tiles))
    for b in bags:
        parts.append(np.ascontiguousarray(b.tiles, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_store(path: str | Path) -> list[EmbeddingBag]:
    """Deserialize a store file; lossless inverse of write_store."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 20:
        raise FormatError(f"{path}: header truncated at byte offset {len(data)}")
    version, dim, n_bags = struct.unpack_from("<III", data, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported store version {version}")
    pos = 20
    entries: list[tuple[str, str, int]] = []
    for _ in range(n_bags):
        try:
            (pid_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            pid = data[pos : pos + pid_len].decode("utf-8")
            pos += pid_len
            (prov_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            prov = data[pos : pos + prov_len].decode("utf-8")
            pos += prov_len
            (n_tiles,) = struct.unpack_from("<I", data, pos)
            pos += 4
        except struct.error:
            raise FormatError(f"{path}: directory truncated at byte offset {pos}") from None
        entries.append((pid, prov, n_tiles))
    bags: list[EmbeddingBag] = []
    for pid, prov, n_tiles in entries:
        nbytes = n_tiles * dim * 4
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: payload truncated at byte offset {len(data)}")
        tiles = np.frombuffer(data[pos : pos + nbytes], dtype="<f4").reshape(n_tiles, dim)
        pos += nbytes
        bags.append(EmbeddingBag(patient_id=pid, tiles=tiles.copy(), provenance=prov))
    return bags
