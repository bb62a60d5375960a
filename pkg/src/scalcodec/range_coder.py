"""Byte-oriented range coder, integer Gaussian CDF tables, and the layered
bitstream container.

The coder is a 32-bit carry-counting range coder: `low` carries into a cached
byte plus a run of pending 0xFF bytes, renormalization emits a byte whenever
the range drops below 2^24. The leading byte of such a coder is provably zero
(interval bases never leave [0, 1)), so it is never emitted. Flushing rounds
`low` up to a multiple of 2^24 inside the final interval, which costs at most
two data bytes instead of the classic five.

CDF tables quantize a zero-mean Gaussian to 16-bit total frequency over the
symbol support [-bound, bound]; every symbol keeps frequency >= 1 so any
clamped symbol stays codable. The normal CDF here is a fixed rational
approximation so tables land on identical integers everywhere.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, StreamError

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
TOTAL_FREQ = 1 << 16
MAX_BOUND = 2048

STREAM_MAGIC = b"SCHM"
STREAM_VERSION = 1
LAYER_BASE = 0
LAYER_CONDITIONAL = 1
LAYER_RESIDUAL = 2
LAYER_STANDALONE = 3

_AS_COEFFS = (0.319381530, -0.356563782, 1.781477937, -1.821255978, 1.330274429)
_AS_T = 0.2316419
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(x):
    """Abramowitz-Stegun 26.2.17 rational approximation, |error| < 7.5e-8.
    Used only for the frozen integer tables; do not swap implementations or
    existing bitstreams stop decoding."""
    ax = abs(x)
    t = 1.0 / (1.0 + _AS_T * ax)
    poly = 0.0
    for c in reversed(_AS_COEFFS):
        poly = poly * t + c
    poly *= t
    tail = _INV_SQRT_2PI * math.exp(-0.5 * ax * ax) * poly
    return 1.0 - tail if x >= 0 else tail


# ---------------------------------------------------------------------------
# coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.pending = 0
        self.started = False
        self.out = bytearray()
        self.finished = False

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            if self.started:
                self.out.append((self.cache + carry) & 0xFF)
            if self.pending:
                self.out.extend(bytes([(0xFF + carry) & 0xFF]) * self.pending)
                self.pending = 0
            self.cache = (self.low >> 24) & 0xFF
            self.started = True
        else:
            self.pending += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, cum_start, freq, total=TOTAL_FREQ):
        if self.finished:
            raise ContractError("encode after finish")
        if freq < 1 or cum_start < 0 or cum_start + freq > total:
            raise ContractError("invalid frequency interval")
        # exact interval split: wastes well under a millibit per symbol, so the
        # payload stays within the estimate-vs-actual agreement targets
        lo = self.range * cum_start // total
        hi = self.range * (cum_start + freq) // total
        self.low += lo
        self.range = hi - lo
        while self.range < TOP:
            self._shift_low()
            self.range <<= 8

    def finish(self):
        """Seals the stream; the decoder zero-pads past the returned bytes."""
        if self.finished:
            raise ContractError("finish called twice")
        self.finished = True
        # round low up to a multiple of 2^24; range >= 2^24 keeps it inside
        # [low, low + range), and its low 24 bits are zero so they need no bytes
        target = -(-self.low // TOP) * TOP
        self.low = target
        self._shift_low()
        self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self):
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def decode_target(self, total=TOTAL_FREQ):
        t = ((self.code + 1) * total - 1) // self.range
        return t if t < total else total - 1

    def advance(self, cum_start, freq, total=TOTAL_FREQ):
        lo = self.range * cum_start // total
        hi = self.range * (cum_start + freq) // total
        self.code -= lo
        self.range = hi - lo
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8


# ---------------------------------------------------------------------------
# quantized Gaussian tables


@dataclass(frozen=True)
class QuantizedCDF:
    """Integer CDF over symbols -bound..bound; cum has 2*bound + 2 entries,
    cum[0] == 0 and cum[-1] == TOTAL_FREQ, frequencies all >= 1."""

    bound: int
    cum: np.ndarray

    def frequency(self, symbol):
        idx = symbol + self.bound
        return int(self.cum[idx + 1] - self.cum[idx])


_cdf_cache: dict[float, QuantizedCDF] = {}


def build_cdf(scale):
    sigma = float(scale)
    if not sigma > 0:
        raise ContractError("build_cdf: scale must be positive")
    hit = _cdf_cache.get(sigma)
    if hit is not None:
        return hit
    # smallest bound whose outside tail is below one table step, floored at 1
    bound = 1
    while normal_cdf(-(bound + 0.5) / sigma) >= 1.0 / TOTAL_FREQ:
        bound += 1
        if bound > MAX_BOUND:
            raise ContractError(f"scale {sigma} too large for 16-bit tables")
    edges = np.array(
        [normal_cdf((k + 0.5) / sigma) for k in range(-bound - 1, bound + 1)]
    )
    probs = np.diff(edges)
    probs[0] += edges[0]          # fold tails into the end bins
    probs[-1] += 1.0 - edges[-1]
    freqs = np.maximum(np.rint(probs * TOTAL_FREQ).astype(np.int64), 1)
    surplus = int(freqs.sum()) - TOTAL_FREQ
    if surplus < 0:
        freqs[int(np.argmax(freqs))] -= surplus
    elif surplus > 0:
        # wide tables round every bin up a little; shave the surplus off the
        # biggest bins without letting any of them drop below one
        for idx in np.argsort(freqs)[::-1]:
            take = min(int(freqs[idx]) - 1, surplus)
            freqs[idx] -= take
            surplus -= take
            if surplus == 0:
                break
        if surplus > 0:
            raise ContractError(f"scale {sigma} cannot fill a 16-bit table")
    cum = np.zeros(freqs.size + 1, dtype=np.uint32)
    np.cumsum(freqs, out=cum[1:])
    cdf = QuantizedCDF(bound=bound, cum=cum)
    if len(_cdf_cache) > 100000:
        _cdf_cache.clear()
    _cdf_cache[sigma] = cdf
    return cdf


def symbol_bound(scales):
    """Vector of coder symbol bounds for an array of scales."""
    flat = np.asarray(scales, dtype=np.float32).reshape(-1)
    return np.array([build_cdf(s).bound for s in flat], dtype=np.int64).reshape(
        np.asarray(scales).shape
    )


def encode_symbols(symbols, scales):
    """Range-codes integer symbols against per-element Gaussian tables.
    symbols and scales are flat, element-aligned sequences."""
    syms = np.asarray(symbols, dtype=np.int64).reshape(-1)
    scl = np.asarray(scales, dtype=np.float32).reshape(-1)
    if syms.size != scl.size:
        raise ContractError("encode_symbols: length mismatch")
    enc = RangeEncoder()
    for q, s in zip(syms.tolist(), scl.tolist()):
        cdf = build_cdf(s)
        idx = q + cdf.bound
        if idx < 0 or idx > 2 * cdf.bound:
            raise ContractError(f"symbol {q} outside coder support +-{cdf.bound}")
        enc.encode(int(cdf.cum[idx]), int(cdf.cum[idx + 1] - cdf.cum[idx]))
    return enc.finish()


def decode_symbols(data, scales):
    scl = np.asarray(scales, dtype=np.float32).reshape(-1)
    dec = RangeDecoder(data)
    out = np.empty(scl.size, dtype=np.int32)
    for i, s in enumerate(scl.tolist()):
        out[i] = decode_one(dec, s)
    return out


def decode_one(decoder, scale):
    """Decodes a single symbol from an open RangeDecoder."""
    cdf = build_cdf(scale)
    t = decoder.decode_target()
    idx = int(np.searchsorted(cdf.cum, t, side="right")) - 1
    decoder.advance(int(cdf.cum[idx]), int(cdf.cum[idx + 1] - cdf.cum[idx]))
    return idx - cdf.bound


def encode_one(encoder, symbol, scale):
    """Encodes a single symbol into an open RangeEncoder."""
    cdf = build_cdf(scale)
    idx = int(symbol) + cdf.bound
    if idx < 0 or idx > 2 * cdf.bound:
        raise ContractError(f"symbol {symbol} outside coder support +-{cdf.bound}")
    encoder.encode(int(cdf.cum[idx]), int(cdf.cum[idx + 1] - cdf.cum[idx]))


def table_bits(symbols, scales):
    """Exact codelength of the quantized tables themselves: sum of
    -log2(freq / TOTAL_FREQ). The coder's payload tracks this, not the real
    Gaussian entropy."""
    syms = np.asarray(symbols, dtype=np.int64).reshape(-1)
    scl = np.asarray(scales, dtype=np.float32).reshape(-1)
    total = 0.0
    for q, s in zip(syms.tolist(), scl.tolist()):
        cdf = build_cdf(s)
        total += -math.log2(cdf.frequency(q) / TOTAL_FREQ)
    return total


# ---------------------------------------------------------------------------
# layered bitstream container


@dataclass(frozen=True)
class LayerRecord:
    kind: int
    channels: int
    height: int
    width: int
    payload: bytes

    def __post_init__(self):
        if self.kind not in (LAYER_BASE, LAYER_CONDITIONAL, LAYER_RESIDUAL,
                             LAYER_STANDALONE):
            raise ContractError(f"unknown layer kind {self.kind}")
        for dim in (self.channels, self.height, self.width):
            if dim < 1 or dim > 0xFFFF:
                raise ContractError("layer dimensions must fit u16 and be >= 1")


def pack_bitstream(layers):
    if not layers:
        raise ContractError("bitstream needs at least one layer")
    if len(layers) > 0xFF:
        raise ContractError("too many layers")
    out = [STREAM_MAGIC, struct.pack("<BB", STREAM_VERSION, len(layers))]
    for layer in layers:
        out.append(struct.pack("<BHHHI", layer.kind, layer.channels,
                               layer.height, layer.width, len(layer.payload)))
        out.append(layer.payload)
    return b"".join(out)


def unpack_bitstream(data):
    if len(data) < 6 or data[:4] != STREAM_MAGIC:
        raise StreamError("bad bitstream magic")
    version, count = struct.unpack("<BB", data[4:6])
    if version != STREAM_VERSION:
        raise StreamError(f"unsupported bitstream version {version}")
    if count < 1:
        raise StreamError("bitstream has no layers")
    pos = 6
    layers = []
    for _ in range(count):
        if pos + 11 > len(data):
            raise StreamError("truncated layer header")
        kind, channels, height, width, plen = struct.unpack(
            "<BHHHI", data[pos : pos + 11]
        )
        pos += 11
        if pos + plen > len(data):
            raise StreamError("truncated layer payload")
        try:
            layers.append(LayerRecord(kind, channels, height, width,
                                      bytes(data[pos : pos + plen])))
        except ContractError as exc:
            raise StreamError(str(exc)) from exc
        pos += plen
    if pos != len(data):
        raise StreamError("trailing bytes after last layer")
    return layers
