"""Byte-oriented 32-bit range coder with explicit carry propagation.

Classic low/range formulation: the encoder keeps a 32-bit window onto the
arbitrary-precision code value; when an addition overflows the window the
carry is propagated into the already-emitted bytes (the 0xFF run collapses to
0x00). The decoder tracks (code - low), which never wraps, so it needs no
carry handling at all. Frequencies are 16-bit quantized CDFs with total 2^16
and every symbol at least one slot, matching the 2^-16 probability floor of
the rate model.

Renormalization is byte-wise with a 2^24 threshold; encoder output for a given
(symbols, tables) pair is a pure function, so encode -> decode -> re-encode is
byte-identical by construction (covered by tests anyway).
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from .errors import ConfigError, TruncatedStreamError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK = 0xFFFFFFFF


class CdfTable:
    """Quantized cumulative frequency table over a contiguous symbol range."""

    __slots__ = ("cum", "freq")

    def __init__(self, freq):
        freq = [int(f) for f in freq]
        if any(f < 1 for f in freq):
            raise ConfigError("every symbol needs frequency >= 1")
        if sum(freq) != TOTAL:
            raise ConfigError(f"frequencies must sum to {TOTAL}, got {sum(freq)}")
        self.freq = freq
        cum = [0]
        for f in freq:
            cum.append(cum[-1] + f)
        self.cum = cum

    def __len__(self):
        return len(self.freq)

    @classmethod
    def from_pmf(cls, pmf) -> "CdfTable":
        """Largest-remainder quantization of a pmf to 16-bit frequencies.

        Every symbol keeps at least one slot; leftover slots go to the symbols
        with the largest fractional parts (ties -> lower symbol).
        """
        pmf = np.asarray(pmf, dtype=np.float64)
        if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
            raise ConfigError("pmf must be finite and non-negative")
        s = pmf.sum()
        if s <= 0:
            raise ConfigError("pmf must have positive mass")
        scaled = pmf / s * (TOTAL - len(pmf))
        base = np.floor(scaled).astype(np.int64)
        rem = int(TOTAL - len(pmf) - base.sum())
        if rem:
            frac = scaled - base
            # stable sort on (-frac) => ties resolve to the lower symbol
            for idx in np.argsort(-frac, kind="stable")[:rem]:
                base[idx] += 1
        return cls((base + 1).tolist())

    def bits(self) -> np.ndarray:
        """Ideal code length per symbol in bits."""
        return -np.log2(np.asarray(self.freq, dtype=np.float64) / TOTAL)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum_lo: int, cum_hi: int):
        r = self.range >> PRECISION
        self.low += cum_lo * r
        if self.low > _MASK:  # carry into already-emitted bytes
            out = self.out
            i = len(out) - 1
            while out[i] == 0xFF:
                out[i] = 0
                i -= 1
            out[i] += 1
            self.low &= _MASK
        self.range = (cum_hi - cum_lo) * r
        while self.range < _TOP:
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK
            self.range <<= 8

    def encode_symbol(self, table: CdfTable, symbol: int):
        self.encode(table.cum[symbol], table.cum[symbol + 1])

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        if len(data) < 4:
            raise TruncatedStreamError("range-coded payload shorter than 4 bytes")
        self.data = data
        self.off = int.from_bytes(data[:4], "big")  # (code - low), never wraps
        self.pos = 4
        self.range = _MASK

    def decode_symbol(self, table: CdfTable) -> int:
        r = self.range >> PRECISION
        v = self.off // r
        if v >= TOTAL:
            v = TOTAL - 1
        s = bisect_right(table.cum, v) - 1
        self.off -= table.cum[s] * r
        self.range = table.freq[s] * r
        while self.range < _TOP:
            if self.pos >= len(self.data):
                raise TruncatedStreamError("range-coded payload exhausted")
            self.off = ((self.off << 8) | self.data[self.pos]) & _MASK
            self.pos += 1
            self.range <<= 8
        return s


def encode_symbols(symbols, table: CdfTable) -> bytes:
    if isinstance(symbols, np.ndarray):
        symbols = symbols.tolist()  # python ints keep the hot loop overflow-free
    enc = RangeEncoder()
    cum = table.cum
    encode = enc.encode
    for s in symbols:
        encode(cum[s], cum[s + 1])
    return enc.finish()


def decode_symbols(data: bytes, count: int, table: CdfTable) -> list:
    dec = RangeDecoder(data)
    return [dec.decode_symbol(table) for _ in range(count)]
