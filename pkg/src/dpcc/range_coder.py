"""32-bit range coder with byte-wise renormalization and carry propagation.

Symbols are coded against integer cumulative frequency tables whose total is
at most ``2**16``.  A table for an alphabet of ``n`` symbols is a sequence
``cdf`` of length ``n + 1`` with ``cdf[0] == 0``, strictly increasing, and
``cdf[-1] == total``.  No floating point is involved anywhere in this module.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import List, Sequence

import numpy as np

from dpcc.errors import DecodeError

__all__ = [
    "AdaptiveModel",
    "RangeDecoder",
    "RangeEncoder",
    "decode_symbols",
    "encode_symbols",
    "validate_cdf",
]

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
MAX_TOTAL = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._done = False

    def encode(self, start: int, size: int, total: int):
        if size <= 0:
            raise ValueError("cannot code a zero-frequency symbol")
        r = self.range // total
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self._cache
            out = self._out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if not self._cache_size:
                    break
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def finish(self) -> bytes:
        if not self._done:
            for _ in range(5):
                self._shift_low()
            self._done = True
        # the first byte is the initial cache and always zero
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        if len(data) < 4:
            raise DecodeError("range-coded stream shorter than 4 bytes")
        self.code = int.from_bytes(data[:4], "big")
        self._pos = 4
        self.range = _MASK32
        self._r = 0

    def target(self, total: int) -> int:
        """Cumulative frequency the next symbol falls on."""
        self._r = self.range // total
        v = self.code // self._r
        if v >= total:
            raise DecodeError("corrupt range-coded stream")
        return v

    def consume(self, start: int, size: int):
        self.code -= self._r * start
        self.range = self._r * size
        data = self._data
        while self.range < _TOP:
            if self._pos >= len(data):
                raise DecodeError("range-coded stream is truncated")
            self.code = ((self.code << 8) | data[self._pos]) & _MASK32
            self._pos += 1
            self.range <<= 8

    def decode(self, cdf: Sequence[int]) -> int:
        total = cdf[-1]
        v = self.target(total)
        sym = bisect_right(cdf, v) - 1
        self.consume(cdf[sym], cdf[sym + 1] - cdf[sym])
        return sym

    @property
    def consumed(self) -> int:
        return self._pos


def validate_cdf(cdf) -> List[int]:
    cdf = [int(c) for c in cdf]
    if len(cdf) < 2 or cdf[0] != 0:
        raise ValueError("cdf must start at 0 and cover at least one symbol")
    if cdf[-1] > MAX_TOTAL:
        raise ValueError(f"cdf total {cdf[-1]} exceeds {MAX_TOTAL}")
    return cdf


def _as_tables(cdfs, count: int) -> List[List[int]]:
    if len(cdfs) and np.isscalar(cdfs[0]):
        return [validate_cdf(cdfs)] * count
    if len(cdfs) != count:
        raise ValueError(f"{count} symbols but {len(cdfs)} cdf tables")
    cache = {}
    out = []
    for c in cdfs:
        key = id(c)
        if key not in cache:
            cache[key] = validate_cdf(c)
        out.append(cache[key])
    return out


def encode_symbols(symbols, cdfs) -> bytes:
    """Range-code ``symbols``; ``cdfs`` is either one shared table or one table
    per symbol."""
    symbols = [int(s) for s in symbols]
    tables = _as_tables(cdfs, len(symbols))
    enc = RangeEncoder()
    for s, cdf in zip(symbols, tables):
        if not 0 <= s < len(cdf) - 1:
            raise ValueError(f"symbol {s} outside its table")
        lo, hi = cdf[s], cdf[s + 1]
        if hi <= lo:
            raise ValueError(f"symbol {s} has zero frequency")
        enc.encode(lo, hi - lo, cdf[-1])
    return enc.finish()


def decode_symbols(data: bytes, cdfs, count: int) -> List[int]:
    tables = _as_tables(cdfs, count)
    dec = RangeDecoder(data)
    return [dec.decode(cdf) for cdf in tables]


class AdaptiveModel:
    """Order-0 adaptive frequency model: every coded symbol gains
    ``increment`` and all counts halve once the total exceeds ``limit``."""

    def __init__(self, num_symbols: int, increment: int = 32, limit: int = 1 << 15):
        if num_symbols < 1 or num_symbols > limit:
            raise ValueError("bad alphabet size")
        self.freqs = [1] * num_symbols
        self.total = num_symbols
        self.increment = increment
        self.limit = limit

    def interval(self, sym: int):
        start = sum(self.freqs[:sym])
        return start, self.freqs[sym]

    def find(self, target: int):
        start = 0
        for sym, f in enumerate(self.freqs):
            if target < start + f:
                return sym, start, f
            start += f
        raise DecodeError("target beyond model total")

    def update(self, sym: int):
        self.freqs[sym] += self.increment
        self.total += self.increment
        if self.total > self.limit:
            self.freqs = [(f + 1) // 2 for f in self.freqs]
            self.total = sum(self.freqs)

    def encode(self, enc: RangeEncoder, sym: int):
        start, f = self.interval(sym)
        enc.encode(start, f, self.total)
        self.update(sym)

    def decode(self, dec: RangeDecoder) -> int:
        sym, start, f = self.find(dec.target(self.total))
        dec.consume(start, f)
        self.update(sym)
        return sym
