"""Lossless octree coding of a voxel coordinate set.

Occupied nodes are visited breadth first; each contributes one occupancy byte
whose bit ``(x_bit << 2) | (y_bit << 1) | z_bit`` flags the matching child.
The byte sequence is range coded with an adaptive order-0 model, or stored raw
when that is smaller, so a stream never exceeds one byte per node plus the
one-byte header.
"""

from __future__ import annotations

from typing import List

import numpy as np

from dpcc.errors import CoordinateRangeError, DecodeError, EmptyInputError
from dpcc.range_coder import AdaptiveModel, RangeDecoder, RangeEncoder
from dpcc.sparse_tensor import unique_coords

__all__ = [
    "coords_bpp",
    "morton_decode",
    "morton_encode",
    "occupancy_levels",
    "octree_decode",
    "octree_encode",
]

_RAW_FLAG = 0x80
_MAX_DEPTH = 20


def morton_encode(coords: np.ndarray, depth: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    code = np.zeros(coords.shape[0], dtype=np.int64)
    for b in range(depth - 1, -1, -1):
        bits = ((coords[:, 0] >> b) & 1) << 2 | ((coords[:, 1] >> b) & 1) << 1 | ((coords[:, 2] >> b) & 1)
        code = (code << 3) | bits
    return code


def morton_decode(codes: np.ndarray, depth: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    out = np.zeros((codes.shape[0], 3), dtype=np.int64)
    for b in range(depth):
        chunk = (codes >> (3 * b)) & 7
        out[:, 0] |= ((chunk >> 2) & 1) << b
        out[:, 1] |= ((chunk >> 1) & 1) << b
        out[:, 2] |= (chunk & 1) << b
    return out


def occupancy_levels(coords: np.ndarray, depth: int) -> List[np.ndarray]:
    """Breadth-first occupancy bytes, one array per tree level."""
    codes = np.unique(morton_encode(coords, depth))
    levels = []
    for level in range(depth):
        child = np.unique(codes >> (3 * (depth - level - 1)))
        parent = child >> 3
        bit = np.left_shift(1, child & 7)
        _, start = np.unique(parent, return_index=True)
        levels.append(np.bitwise_or.reduceat(bit, start).astype(np.uint8))
    return levels


def _check(coords: np.ndarray, depth: int) -> np.ndarray:
    if not 1 <= depth <= _MAX_DEPTH:
        raise ValueError(f"octree depth must be in [1, {_MAX_DEPTH}]")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise EmptyInputError("cannot octree-code an empty coordinate set")
    if coords.min() < 0 or coords.max() >= (1 << depth):
        raise CoordinateRangeError(f"coordinates must lie in [0, {1 << depth}) for depth {depth}")
    return coords


def octree_encode(coords: np.ndarray, depth: int) -> bytes:
    coords = _check(coords, depth)
    occupancy = np.concatenate(occupancy_levels(coords, depth))
    enc = RangeEncoder()
    model = AdaptiveModel(255)
    for byte in occupancy.tolist():
        model.encode(enc, byte - 1)
    coded = enc.finish()
    if len(coded) >= occupancy.size:
        return bytes([depth | _RAW_FLAG]) + occupancy.tobytes()
    return bytes([depth]) + coded


def octree_decode(data: bytes, depth: int = None) -> np.ndarray:
    """Inverse of :func:`octree_encode`; coordinates come back canonical."""
    if not data:
        raise DecodeError("empty octree stream")
    header = data[0]
    stream_depth = header & ~_RAW_FLAG
    if depth is not None and stream_depth != depth:
        raise DecodeError(f"octree stream has depth {stream_depth}, expected {depth}")
    if not 1 <= stream_depth <= _MAX_DEPTH:
        raise DecodeError(f"bad octree depth {stream_depth}")
    raw = bool(header & _RAW_FLAG)
    payload = data[1:]
    pos = 0
    if not raw:
        dec = RangeDecoder(payload)
        model = AdaptiveModel(255)

    nodes = np.zeros(1, dtype=np.int64)
    slots = np.arange(8, dtype=np.int64)
    for _ in range(stream_depth):
        n = nodes.shape[0]
        if raw:
            if pos + n > len(payload):
                raise DecodeError("octree stream is truncated")
            occ = np.frombuffer(payload, dtype=np.uint8, count=n, offset=pos).astype(np.int64)
            pos += n
            if np.any(occ == 0):
                raise DecodeError("occupied node with no children")
        else:
            occ = np.array([model.decode(dec) + 1 for _ in range(n)], dtype=np.int64)
        mask = ((occ[:, None] >> slots) & 1).astype(bool)
        nodes = ((nodes[:, None] << 3) | slots)[mask]

    used = pos if raw else dec.consumed
    if used != len(payload):
        raise DecodeError("trailing bytes after octree stream")
    return unique_coords(morton_decode(nodes, stream_depth))


def coords_bpp(coded, num_points: int) -> float:
    """Bits per point of a substream, normalised by the original cloud size."""
    if num_points <= 0:
        raise ValueError("num_points must be positive")
    size = coded if isinstance(coded, int) else len(coded)
    return 8.0 * size / num_points
