"""Binary frame container.

Frame layout (little-endian)::

    "DPCC" | version u8 | frame_type u8 | depth u8 | bottleneck_channels u8
    checkpoint_hash u64
    n_full u32 | n_1ds u32 | n_2ds u32 | n_3ds u32
    coord_len u32 | coordinate substream
    header_len u16 | entropy-model header
    feat_len u32 | feature substream

A sequence is a u32 frame count followed by the frames back to back.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from dpcc.errors import DecodeError

__all__ = [
    "FRAME_I",
    "FRAME_P",
    "FrameBitstream",
    "pack_entropy_header",
    "pack_sequence",
    "unpack_entropy_header",
    "unpack_sequence",
]

MAGIC = b"DPCC"
VERSION = 1
FRAME_I = 0
FRAME_P = 1

_FIXED = struct.Struct("<4sBBBBQIIII")


@dataclass(frozen=True)
class FrameBitstream:
    frame_type: int
    depth: int
    bottleneck_channels: int
    checkpoint_hash: int
    n_full: int
    n_1ds: int
    n_2ds: int
    n_3ds: int
    coord_stream: bytes
    entropy_header: bytes
    feature_stream: bytes

    def to_bytes(self) -> bytes:
        if len(self.entropy_header) > 0xFFFF:
            raise ValueError("entropy header too long")
        return b"".join([
            _FIXED.pack(MAGIC, VERSION, self.frame_type, self.depth, self.bottleneck_channels,
                        self.checkpoint_hash, self.n_full, self.n_1ds, self.n_2ds, self.n_3ds),
            struct.pack("<I", len(self.coord_stream)), self.coord_stream,
            struct.pack("<H", len(self.entropy_header)), self.entropy_header,
            struct.pack("<I", len(self.feature_stream)), self.feature_stream,
        ])

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> Tuple["FrameBitstream", int]:
        """Parse one frame starting at ``offset``; returns it with the offset
        just past its end."""
        try:
            magic, version, ftype, depth, ch, chash, nf, n1, n2, n3 = _FIXED.unpack_from(data, offset)
            pos = offset + _FIXED.size
            if magic != MAGIC:
                raise DecodeError("bad frame magic")
            if version != VERSION:
                raise DecodeError(f"unsupported bitstream version {version}")
            if ftype not in (FRAME_I, FRAME_P):
                raise DecodeError(f"unknown frame type {ftype}")
            chunks = []
            for fmt in ("<I", "<H", "<I"):
                (n,) = struct.unpack_from(fmt, data, pos)
                pos += struct.calcsize(fmt)
                if pos + n > len(data):
                    raise DecodeError("frame substream is truncated")
                chunks.append(bytes(data[pos : pos + n]))
                pos += n
        except struct.error as exc:
            raise DecodeError(f"truncated frame header: {exc}") from exc
        if not nf >= n1 >= n2 >= n3:
            raise DecodeError("inconsistent point counts")
        return cls(ftype, depth, ch, chash, nf, n1, n2, n3, *chunks), pos

    @property
    def size(self) -> int:
        return _FIXED.size + 4 + 2 + 4 + len(self.coord_stream) + len(self.entropy_header) + len(self.feature_stream)

    def bits(self) -> dict:
        """Bit budget split into coordinate, feature and side-information parts."""
        coords = 8 * len(self.coord_stream)
        feats = 8 * len(self.feature_stream)
        return {"coords": coords, "feats": feats, "side": 8 * self.size - coords - feats, "total": 8 * self.size}

    def bpp(self) -> dict:
        return {k: v / self.n_full for k, v in self.bits().items()}


def pack_entropy_header(count: int, v_min: np.ndarray, v_max: np.ndarray) -> bytes:
    """Element count (u32) then ``(v_min, v_max)`` as i16 pairs per channel."""
    out = [struct.pack("<I", count)]
    for lo, hi in zip(np.asarray(v_min).tolist(), np.asarray(v_max).tolist()):
        out.append(struct.pack("<hh", lo, hi))
    return b"".join(out)


def unpack_entropy_header(blob: bytes, channels: int):
    if len(blob) != 4 + 4 * channels:
        raise DecodeError("entropy header length does not match the channel count")
    (count,) = struct.unpack_from("<I", blob, 0)
    pairs = np.array(struct.unpack_from(f"<{2 * channels}h", blob, 4), dtype=np.int64).reshape(channels, 2)
    if np.any(pairs[:, 0] > pairs[:, 1]):
        raise DecodeError("entropy header has an empty support")
    return count, pairs[:, 0].copy(), pairs[:, 1].copy()


def pack_sequence(frames: List[FrameBitstream]) -> bytes:
    return struct.pack("<I", len(frames)) + b"".join(f.to_bytes() for f in frames)


def unpack_sequence(data: bytes) -> List[FrameBitstream]:
    if len(data) < 4:
        raise DecodeError("sequence container shorter than its frame count")
    (count,) = struct.unpack_from("<I", data, 0)
    pos, frames = 4, []
    for _ in range(count):
        frame, pos = FrameBitstream.from_bytes(data, pos)
        frames.append(frame)
    if pos != len(data):
        raise DecodeError("trailing bytes after the last frame")
    return frames
