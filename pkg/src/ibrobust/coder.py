"""Arithmetic coding of quantized latents against the learned entropy model.

Classic 32-bit arithmetic coder (Witten-Neal-Cleary style) over 16-bit
quantized per-channel CDF tables. Round trips are exact; the stream length
stays within a small constant plus quantization slack of the model entropy.

Bitstream layout: varint(h) varint(w) then the coded payload for the
(channels, h, w) symbol grid in C order. The channel count comes from the
entropy model at decode time.
"""

from __future__ import annotations

import numpy as np

from .entropy import FactorizedEntropyModel, LatentCode
from .errors import CorruptStream, SymbolOutOfSupport

_HALF = 1 << 31
_QUARTER = 1 << 30
_THREEQ = 3 << 30
_MASK = (1 << 32) - 1


class _BitWriter:
    def __init__(self):
        self.bytes = bytearray()
        self.acc = 0
        self.nbits = 0

    def put(self, bit: int):
        self.acc = (self.acc << 1) | bit
        self.nbits += 1
        if self.nbits == 8:
            self.bytes.append(self.acc)
            self.acc = 0
            self.nbits = 0

    def flush(self) -> bytes:
        if self.nbits:
            self.bytes.append(self.acc << (8 - self.nbits))
        return bytes(self.bytes)


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def get(self) -> int:
        byte = self.pos >> 3
        if byte >= len(self.data):
            return 0  # zeros beyond the end, standard termination convention
        bit = (self.data[byte] >> (7 - (self.pos & 7))) & 1
        self.pos += 1
        return bit


class ArithmeticEncoder:
    def __init__(self):
        self.low = 0
        self.high = _MASK
        self.pending = 0
        self.out = _BitWriter()

    def _emit(self, bit: int):
        self.out.put(bit)
        inv = bit ^ 1
        while self.pending:
            self.out.put(inv)
            self.pending -= 1

    def encode(self, cum_lo: int, cum_hi: int, total: int):
        span = self.high - self.low + 1
        self.high = self.low + (span * cum_hi) // total - 1
        self.low = self.low + (span * cum_lo) // total
        while True:
            if self.high < _HALF:
                self._emit(0)
            elif self.low >= _HALF:
                self._emit(1)
                self.low -= _HALF
                self.high -= _HALF
            elif self.low >= _QUARTER and self.high < _THREEQ:
                self.pending += 1
                self.low -= _QUARTER
                self.high -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) | 1) & _MASK

    def finish(self) -> bytes:
        self.pending += 1
        if self.low < _QUARTER:
            self._emit(0)
        else:
            self._emit(1)
        return self.out.flush()


class ArithmeticDecoder:
    def __init__(self, data: bytes):
        self.reader = _BitReader(data)
        self.low = 0
        self.high = _MASK
        self.code = 0
        for _ in range(32):
            self.code = (self.code << 1) | self.reader.get()

    def decode_target(self, total: int) -> int:
        span = self.high - self.low + 1
        return ((self.code - self.low + 1) * total - 1) // span

    def consume(self, cum_lo: int, cum_hi: int, total: int):
        span = self.high - self.low + 1
        self.high = self.low + (span * cum_hi) // total - 1
        self.low = self.low + (span * cum_lo) // total
        while True:
            if self.high < _HALF:
                pass
            elif self.low >= _HALF:
                self.low -= _HALF
                self.high -= _HALF
                self.code -= _HALF
            elif self.low >= _QUARTER and self.high < _THREEQ:
                self.low -= _QUARTER
                self.high -= _QUARTER
                self.code -= _QUARTER
            else:
                break
            self.low = (self.low << 1) & _MASK
            self.high = ((self.high << 1) | 1) & _MASK
            self.code = ((self.code << 1) | self.reader.get()) & _MASK


def _write_varint(out: bytearray, n: int):
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    shift = 0
    value = 0
    while True:
        if pos >= len(data):
            raise CorruptStream("truncated varint header")
        b = data[pos]
        pos += 1
        value |= (b & 0x7F) << shift
        if not b & 0x80:
            return value, pos
        shift += 7
        if shift > 35:
            raise CorruptStream("varint header too long")


def entropy_encode(code: LatentCode) -> bytes:
    """Encode a LatentCode's symbols; requires an eval-mode code."""
    if code.symbols is None:
        raise ValueError("cannot encode a train-mode (noisy) latent code")
    model = code.entropy_model
    if model is None:
        raise ValueError("latent code lost its entropy model reference")
    symbols = np.asarray(code.symbols)
    if symbols.ndim != 3 or symbols.shape[0] != model.channels:
        raise SymbolOutOfSupport(
            f"symbols shape {symbols.shape} does not match {model.channels} channels"
        )
    tables = model.coding_tables()
    _, h, w = symbols.shape
    header = bytearray()
    _write_varint(header, h)
    _write_varint(header, w)
    enc = ArithmeticEncoder()
    for ch in range(model.channels):
        tab = tables[ch]
        smin, smax, cdf = tab["smin"], tab["smax"], tab["cdf"]
        total = int(cdf[-1])
        plane = symbols[ch].reshape(-1)
        if plane.size and (plane.min() < smin or plane.max() > smax):
            raise SymbolOutOfSupport(
                f"channel {ch}: symbol outside modeled range [{smin}, {smax}]"
            )
        for s in plane:
            idx = int(s) - smin
            enc.encode(int(cdf[idx]), int(cdf[idx + 1]), total)
    return bytes(header) + enc.finish()


def entropy_decode(bitstream: bytes, entropy_model: FactorizedEntropyModel) -> np.ndarray:
    """Inverse of :func:`entropy_encode`: returns the (channels, h, w) symbols."""
    h, pos = _read_varint(bitstream, 0)
    w, pos = _read_varint(bitstream, pos)
    if h == 0 or w == 0:
        return np.zeros((entropy_model.channels, h, w), dtype=np.int32)
    tables = entropy_model.coding_tables()
    dec = ArithmeticDecoder(bitstream[pos:])
    out = np.empty((entropy_model.channels, h, w), dtype=np.int32)
    for ch in range(entropy_model.channels):
        tab = tables[ch]
        smin, cdf = tab["smin"], tab["cdf"]
        total = int(cdf[-1])
        plane = out[ch].reshape(-1)
        for i in range(plane.size):
            target = dec.decode_target(total)
            if not 0 <= target < total:
                raise CorruptStream("decoder target outside table range")
            idx = int(np.searchsorted(cdf, target, side="right")) - 1
            plane[i] = idx + smin
            dec.consume(int(cdf[idx]), int(cdf[idx + 1]), total)
    return out
