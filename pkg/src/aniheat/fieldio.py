"""GridField binary and CSV formats.

Binary layout (little-endian): a 32-byte header
``magic "AHGF" | version u32 | dim u32 | N u32 | L f64 | 8 reserved zero bytes``
followed by ``N**dim`` float64 values in row-major order.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FieldFormatError
from .propagator import Grid, GridField

MAGIC = b"AHGF"
VERSION = 1
_HEADER = struct.Struct("<4sIIId8x")
HEADER_SIZE = _HEADER.size  # 32


def field_to_bytes(u: GridField) -> bytes:
    g = u.grid
    head = _HEADER.pack(MAGIC, VERSION, g.dim, g.n_points, float(g.length))
    return head + np.ascontiguousarray(u.values, dtype="<f8").tobytes()


def field_from_bytes(data: bytes) -> GridField:
    if len(data) < HEADER_SIZE:
        raise FieldFormatError(f"file too short for header ({len(data)} bytes)")
    magic, version, dim, n, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FieldFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FieldFormatError(f"unsupported version {version}")
    try:
        grid = Grid(dim, n, length)
    except ValueError as exc:
        raise FieldFormatError(f"invalid grid in header: {exc}") from exc
    expected = HEADER_SIZE + 8 * n ** dim
    if len(data) != expected:
        raise FieldFormatError(f"expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=HEADER_SIZE)
    if not np.all(np.isfinite(values)):
        raise FieldFormatError("field contains non-finite values")
    return GridField(grid, values.astype(float))


def write_field(path, u: GridField) -> str:
    """Write ``u`` and return the sha256 of the written bytes."""
    data = field_to_bytes(u)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_field(path) -> GridField:
    return field_from_bytes(Path(path).read_bytes())


def write_field_csv(path, u: GridField):
    """One row per grid point: x_1..x_n, value."""
    g = u.grid
    pts = g.points().reshape(-1, g.dim)
    vals = u.values.reshape(-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(g.dim)] + ["value"])
        for p, v in zip(pts, vals):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
