"""Byte-oriented range coder with 16-bit probability precision.

The coder keeps a 64-bit ``low`` (33 significant bits: 32 + carry) and a
32-bit ``range``, renormalizing a byte at a time whenever the range drops
below 2**24. Carries are propagated through a cached byte plus a run of
pending 0xFF bytes. The always-zero leading byte is elided on write and
re-supplied on read; trailing zero bytes are stripped after a flush that
picks the code value with the most trailing zero bits.

Symbols are coded against integer frequency tables summing to 2**16.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from ..errors import CorruptStream

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
TOP = 1 << 24
MASK32 = 0xFFFFFFFF
# only zeros inside the 4-byte flush are stripped; the decoder also reads the
# final cached byte, so a well-formed stream is over-read by at most 5 bytes
FLUSH_STRIP = 4
MAX_OVERRUN = FLUSH_STRIP + 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def encode(self, start: int, freq: int) -> None:
        r = self.range >> PROB_BITS
        self.low += r * start
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bit(self, bit: int) -> None:
        half = PROB_TOTAL >> 1
        self.encode(half if bit else 0, half)

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def finish(self) -> bytes:
        hi = self.low + self.range
        for k in range(32, -1, -1):
            m = (1 << k) - 1
            v = (self.low + m) & ~m
            if v < hi:
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        data = bytes(self.out)
        assert data[0] == 0, "leading byte of a range-coded stream must be zero"
        data = data[1:]
        strip = len(data) - len(data.rstrip(b"\x00"))
        return data[: len(data) - min(strip, FLUSH_STRIP)]


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        self._r = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        if pos - len(self.data) >= MAX_OVERRUN:
            raise CorruptStream("range-coded payload ended prematurely")
        return 0

    def target(self) -> int:
        self._r = self.range >> PROB_BITS
        v = self.code // self._r
        if v >= PROB_TOTAL:
            raise CorruptStream("range decoder state out of bounds")
        return v

    def consume(self, start: int, freq: int) -> None:
        self.code -= self._r * start
        self.range = self._r * freq
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next_byte()) & ((1 << 40) - 1)

    def decode_bit(self) -> int:
        half = PROB_TOTAL >> 1
        bit = 1 if self.target() >= half else 0
        self.consume(half if bit else 0, half)
        return bit

    @property
    def overrun(self) -> int:
        return max(0, self.pos - len(self.data))


def quantize_pmf(pmf: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Turn row-wise probabilities into integer frequencies summing to 2**16.

    Every active bin gets at least frequency 1; inactive bins get 0. The
    rounding deficit goes to the first most-probable bin of each row.
    """
    pmf = np.where(active, np.clip(pmf, 0.0, 1.0), 0.0)
    n_active = active.sum(axis=1, keepdims=True)
    budget = (PROB_TOTAL - n_active).astype(np.float64)
    freq = np.where(active, np.floor(pmf * budget).astype(np.int64) + 1, 0)
    # pmf may sum slightly above 1 after float error; shave from the top bin
    deficit = PROB_TOTAL - freq.sum(axis=1)
    top = np.argmax(np.where(active, pmf, -1.0), axis=1)
    freq[np.arange(len(freq)), top] += deficit
    if np.any(freq[np.arange(len(freq)), top] < 1):
        raise ValueError("frequency table could not be normalized")
    return freq


def cumulative(freq: np.ndarray) -> np.ndarray:
    cum = np.zeros((freq.shape[0], freq.shape[1] + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cum[:, 1:])
    return cum


def _encode_escape(enc: RangeEncoder, excess: int, negative: bool) -> None:
    # Elias-gamma on excess + 1, then a sign bit
    v = excess + 1
    nb = v.bit_length()
    for _ in range(nb - 1):
        enc.encode_bit(1)
    enc.encode_bit(0)
    for i in range(nb - 2, -1, -1):
        enc.encode_bit((v >> i) & 1)
    enc.encode_bit(1 if negative else 0)


def _decode_escape(dec: RangeDecoder) -> tuple[int, bool]:
    nb = 1
    while dec.decode_bit():
        nb += 1
        if nb > 40:
            raise CorruptStream("escape code too long")
    v = 1
    for _ in range(nb - 1):
        v = (v << 1) | dec.decode_bit()
    negative = bool(dec.decode_bit())
    return v - 1, negative


def encode_integers(
    values: np.ndarray, centers: np.ndarray, half_widths: np.ndarray, cum: np.ndarray, rows: np.ndarray
) -> bytes:
    """Range-code integer ``values`` against per-element windowed tables.

    Element i uses table row ``rows[i]`` whose columns are offsets
    ``-kmax..kmax`` from ``centers[i]`` followed by an escape column.
    Offsets beyond ``half_widths[i]`` are sent as escape + Elias-gamma.
    """
    kmax = (cum.shape[1] - 3) // 2
    escape = 2 * kmax + 1
    enc = RangeEncoder()
    cum_l = cum.tolist()
    for v, c, k, r in zip(values.tolist(), centers.tolist(), half_widths.tolist(), rows.tolist()):
        d = v - c
        row = cum_l[r]
        if -k <= d <= k:
            s = d + kmax
            enc.encode(row[s], row[s + 1] - row[s])
        else:
            enc.encode(row[escape], row[escape + 1] - row[escape])
            _encode_escape(enc, abs(d) - k - 1, d < 0)
    return enc.finish()


def decode_integers(
    data: bytes, centers: np.ndarray, half_widths: np.ndarray, cum: np.ndarray, rows: np.ndarray
) -> np.ndarray:
    kmax = (cum.shape[1] - 3) // 2
    escape = 2 * kmax + 1
    dec = RangeDecoder(data)
    cum_l = cum.tolist()
    out = []
    for c, k, r in zip(centers.tolist(), half_widths.tolist(), rows.tolist()):
        row = cum_l[r]
        t = dec.target()
        s = bisect_right(row, t) - 1
        dec.consume(row[s], row[s + 1] - row[s])
        if s == escape:
            excess, negative = _decode_escape(dec)
            d = k + 1 + excess
            out.append(c - d if negative else c + d)
        else:
            out.append(c + s - kmax)
    if dec.overrun > MAX_OVERRUN:
        raise CorruptStream("range-coded payload ended prematurely")
    return np.asarray(out, dtype=np.int64)
