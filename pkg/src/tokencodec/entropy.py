"""Model-driven lossless entropy coding of token streams.

A fresh distribution is drawn from the probability model at every
symbol.  All coding decisions run on 16-bit integer frequency tables,
never on floats, so sender and receiver stay in lockstep.  Two codecs
are provided: per-step canonical Huffman (one-bit-per-symbol floor) and
a 32-bit binary range coder whose payload stays within 32 bits of the
stream's cross-entropy under the quantized distributions.

Bit accounting is strict: the encoder materializes every bit the
decoder will read, so a payload truncated by even one bit raises
``CorruptStream`` instead of decoding to garbage.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContextError,
    CorruptStream,
    InvalidSymbol,
    ModelMismatch,
    ShapeError,
)
from .probmodel.base import TokenModel
from .probmodel.flatten import ROLE_COARSE, coarse_layout

FREQ_TOTAL = 1 << 16
STATE_BITS = 32
_FULL = 1 << STATE_BITS
_MASK = _FULL - 1
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2

MODE_HUFFMAN = "huffman"
MODE_RANGE = "range"
_MODE_BYTES = {MODE_HUFFMAN: 0, MODE_RANGE: 1}
_MODE_NAMES = {v: k for k, v in _MODE_BYTES.items()}

ZERO_MODEL_ID = bytes(32)

_HEADER_MAGIC = b"TCB1"
_HEADER_VERSION = 1
_HEADER_FMT = "<4sHIBBIIHB32s32sI"
_HEADER_LEN = struct.calcsize(_HEADER_FMT) + 4  # + CRC32


# ---------------------------------------------------------------------------
# Quantized distributions
# ---------------------------------------------------------------------------

@dataclass
class QuantizedDistribution:
    """Integer frequency table summing exactly to 2**16, all entries >= 1."""

    freqs: np.ndarray
    cum: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        freqs = np.asarray(self.freqs, dtype=np.int64)
        if freqs.ndim != 1 or freqs.size < 2:
            raise ShapeError("frequency table must be 1-D with >= 2 symbols")
        if freqs.min() < 1:
            raise ShapeError("every frequency must be >= 1")
        if int(freqs.sum()) != FREQ_TOTAL:
            raise ShapeError(f"frequencies must sum to {FREQ_TOTAL}, got {freqs.sum()}")
        self.freqs = freqs
        self.cum = np.concatenate([[0], np.cumsum(freqs)])

    def entropy_bits(self) -> float:
        p = self.freqs / FREQ_TOTAL
        return float(-(p * np.log2(p)).sum())


def quantize_distribution(d: np.ndarray) -> QuantizedDistribution:
    """Largest-remainder apportionment of a probability vector to a
    total of 2**16 with a floor of 1 per symbol; ties break to the
    lowest symbol index."""
    p = np.asarray(d, dtype=np.float64)
    scaled = p * FREQ_TOTAL
    floors = np.floor(scaled)
    base = np.maximum(floors.astype(np.int64), 1)
    deficit = FREQ_TOTAL - int(base.sum())
    if deficit > 0:
        remainders = scaled - floors
        order = np.lexsort((np.arange(p.size), -remainders))
        base[order[:deficit]] += 1
    else:
        while deficit < 0:
            i = int(np.argmax(base))
            take = min(int(base[i]) - 1, -deficit)
            base[i] -= take
            deficit += take
    return QuantizedDistribution(base)


def entropy_bits(d: np.ndarray) -> float:
    """Shannon entropy -sum p log2 p of a probability vector."""
    p = np.asarray(d, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log2(nz)).sum())


# ---------------------------------------------------------------------------
# Canonical Huffman codes
# ---------------------------------------------------------------------------

def huffman_code_lengths(q: QuantizedDistribution) -> np.ndarray:
    """Optimal prefix-code lengths for a frequency table.

    In-place minimum-redundancy construction over leaves sorted by
    (frequency, symbol); on weight ties a leaf is merged before an
    internal node, so the result is deterministic.
    """
    freqs = q.freqs
    n = freqs.size
    order = np.argsort(freqs, kind="stable")
    a = freqs[order].tolist()
    # Phase 1: pairwise merges, reusing the array for parent pointers.
    leaf = 0
    root = 0
    for nxt in range(n - 1):
        if leaf >= n or (root < nxt and a[root] < a[leaf]):
            a[nxt] = a[root]
            a[root] = nxt
            root += 1
        else:
            a[nxt] = a[leaf]
            leaf += 1
        if leaf >= n or (root < nxt and a[root] < a[leaf]):
            a[nxt] += a[root]
            a[root] = nxt
            root += 1
        else:
            a[nxt] += a[leaf]
            leaf += 1
    # Phase 2: parent pointers to internal-node depths.
    a[n - 2] = 0
    for nxt in range(n - 3, -1, -1):
        a[nxt] = a[a[nxt]] + 1
    # Phase 3: internal depths to leaf depths, longest codes first.
    avail = 1
    used = 0
    depth = 0
    root = n - 2
    nxt = n - 1
    while avail > 0:
        while root >= 0 and a[root] == depth:
            used += 1
            root -= 1
        while avail > used:
            a[nxt] = depth
            nxt -= 1
            avail -= 1
        avail = 2 * used
        used = 0
        depth += 1
    lengths = np.zeros(n, dtype=np.int64)
    lengths[order] = a
    return lengths


def _rank_tables(lengths: np.ndarray):
    """(by_rank, count, first_code, first_rank) for a canonical code."""
    n = lengths.size
    by_rank = np.lexsort((np.arange(n), lengths))
    max_len = int(lengths.max())
    count = np.bincount(lengths, minlength=max_len + 1)
    first_rank = np.concatenate([[0], np.cumsum(count)])
    first_code = np.zeros(max_len + 1, dtype=np.int64)
    code = 0
    for length in range(1, max_len + 1):
        code <<= 1
        first_code[length] = code
        code += int(count[length])
    return by_rank, count, first_code, first_rank


def canonical_codes(lengths: np.ndarray) -> np.ndarray:
    """Canonical code values: symbols sorted by (length, index) receive
    consecutive codes, shifted left whenever the length grows."""
    by_rank, count, first_code, first_rank = _rank_tables(lengths)
    rank_of = np.empty(lengths.size, dtype=np.int64)
    rank_of[by_rank] = np.arange(lengths.size)
    return first_code[lengths] + (rank_of - first_rank[lengths])


class _CanonicalDecoder:
    """Bit-serial decoder for a canonical code described by its lengths."""

    def __init__(self, lengths: np.ndarray):
        by_rank, count, first_code, first_rank = _rank_tables(lengths)
        self.by_rank = by_rank.tolist()
        self.count = count.tolist()
        self.first_code = first_code.tolist()
        self.first_rank = first_rank.tolist()
        self.max_len = int(lengths.max())

    def read_symbol(self, reader: "BitReader") -> int:
        value = 0
        for length in range(1, self.max_len + 1):
            value = (value << 1) | reader.read_bit()
            offset = value - self.first_code[length]
            if 0 <= offset < self.count[length]:
                return self.by_rank[self.first_rank[length] + offset]
        raise CorruptStream("bit pattern matches no Huffman code")


# ---------------------------------------------------------------------------
# Bit I/O
# ---------------------------------------------------------------------------

class BitWriter:
    """MSB-first bit sink backed by a bytearray."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._n = 0
        self.bit_count = 0

    def write_bit(self, bit: int) -> None:
        self._acc = (self._acc << 1) | (bit & 1)
        self._n += 1
        self.bit_count += 1
        if self._n == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._n = 0

    def write_bits(self, value: int, width: int) -> None:
        for shift in range(width - 1, -1, -1):
            self.write_bit((value >> shift) & 1)

    def getvalue(self) -> bytes:
        if self._n:
            return bytes(self._bytes) + bytes([self._acc << (8 - self._n)])
        return bytes(self._bytes)


class BitReader:
    """MSB-first bit source with a hard end: reading past ``bit_count``
    raises ``CorruptStream``."""

    def __init__(self, data: bytes, bit_count: int):
        if bit_count > 8 * len(data):
            raise CorruptStream("declared bit count exceeds payload size")
        self._data = data
        self._bit_count = bit_count
        self._pos = 0

    def read_bit(self) -> int:
        if self._pos >= self._bit_count:
            raise CorruptStream("payload exhausted mid-symbol")
        byte = self._data[self._pos >> 3]
        bit = (byte >> (7 - (self._pos & 7))) & 1
        self._pos += 1
        return bit

    @property
    def bits_read(self) -> int:
        return self._pos


# ---------------------------------------------------------------------------
# Binary range coder (32-bit state, strict bit accounting)
# ---------------------------------------------------------------------------

class RangeEncoder:
    def __init__(self, writer: BitWriter):
        self._w = writer
        self._low = 0
        self._high = _MASK
        self._underflow = 0

    def encode(self, q: QuantizedDistribution, symbol: int) -> None:
        span = self._high - self._low + 1
        cum = q.cum
        new_low = self._low + int(cum[symbol]) * span // FREQ_TOTAL
        new_high = self._low + int(cum[symbol + 1]) * span // FREQ_TOTAL - 1
        self._low, self._high = new_low, new_high
        while ((self._low ^ self._high) & _HALF) == 0:
            bit = self._low >> (STATE_BITS - 1)
            self._w.write_bit(bit)
            inverse = bit ^ 1
            for _ in range(self._underflow):
                self._w.write_bit(inverse)
            self._underflow = 0
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while self._low & ~self._high & _QUARTER:
            self._underflow += 1
            self._low = (self._low << 1) ^ _HALF
            self._high = ((self._high ^ _HALF) << 1) | _HALF | 1

    def finish(self) -> None:
        """Pin a value inside the final interval and materialize every
        bit the decoder will consume (exactly STATE_BITS extra)."""
        self._w.write_bit(1)
        for _ in range(self._underflow):
            self._w.write_bit(0)
        for _ in range(STATE_BITS - 1):
            self._w.write_bit(0)


class RangeDecoder:
    def __init__(self, reader: BitReader):
        self._r = reader
        self._low = 0
        self._high = _MASK
        self._code = 0
        for _ in range(STATE_BITS):
            self._code = (self._code << 1) | reader.read_bit()

    def decode(self, q: QuantizedDistribution) -> int:
        span = self._high - self._low + 1
        offset = self._code - self._low
        value = ((offset + 1) * FREQ_TOTAL - 1) // span
        symbol = int(np.searchsorted(q.cum, value, side="right")) - 1
        cum = q.cum
        new_low = self._low + int(cum[symbol]) * span // FREQ_TOTAL
        new_high = self._low + int(cum[symbol + 1]) * span // FREQ_TOTAL - 1
        self._low, self._high = new_low, new_high
        while ((self._low ^ self._high) & _HALF) == 0:
            self._code = ((self._code << 1) & _MASK) | self._r.read_bit()
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while self._low & ~self._high & _QUARTER:
            self._code = (
                (self._code & _HALF)
                | ((self._code << 1) & (_MASK >> 1))
                | self._r.read_bit()
            )
            self._low = (self._low << 1) ^ _HALF
            self._high = ((self._high ^ _HALF) << 1) | _HALF | 1
        return symbol


# ---------------------------------------------------------------------------
# Bitstream container
# ---------------------------------------------------------------------------

@dataclass
class Bitstream:
    """Self-describing container: header plus entropy-coded payload."""

    nc: int
    n_coarse: int
    n_fine: int
    frame_count: int
    sample_rate: int
    hop: int
    mode: str
    coarse_model_id: bytes
    fine_model_id: bytes
    symbol_count: int
    payload: bytes
    payload_bits: int

    def __post_init__(self) -> None:
        if self.mode not in _MODE_BYTES:
            raise ShapeError(f"unknown mode {self.mode!r}")
        if len(self.coarse_model_id) != 32 or len(self.fine_model_id) != 32:
            raise ShapeError("model ids must be 32 bytes")
        if self.payload_bits > 8 * len(self.payload):
            raise ShapeError("payload_bits exceeds payload size")

    def header_bytes(self) -> bytes:
        head = struct.pack(
            _HEADER_FMT,
            _HEADER_MAGIC,
            _HEADER_VERSION,
            self.nc,
            self.n_coarse,
            self.n_fine,
            self.frame_count,
            self.sample_rate,
            self.hop,
            _MODE_BYTES[self.mode],
            self.coarse_model_id,
            self.fine_model_id,
            self.symbol_count,
        )
        return head + struct.pack("<I", zlib.crc32(head) & 0xFFFFFFFF)

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Bitstream":
        if len(blob) < _HEADER_LEN:
            raise CorruptStream("blob shorter than a bitstream header")
        head, crc_raw = blob[: _HEADER_LEN - 4], blob[_HEADER_LEN - 4 : _HEADER_LEN]
        (crc,) = struct.unpack("<I", crc_raw)
        if zlib.crc32(head) & 0xFFFFFFFF != crc:
            raise CorruptStream("header checksum mismatch")
        (magic, version, nc, n_coarse, n_fine, frame_count, sample_rate,
         hop, mode_b, coarse_id, fine_id, symbol_count) = struct.unpack(_HEADER_FMT, head)
        if magic != _HEADER_MAGIC:
            raise CorruptStream("bad bitstream magic")
        if version != _HEADER_VERSION:
            raise CorruptStream(f"unsupported bitstream version {version}")
        if mode_b not in _MODE_NAMES:
            raise CorruptStream(f"unknown mode byte {mode_b}")
        payload = blob[_HEADER_LEN:]
        return cls(
            nc=nc, n_coarse=n_coarse, n_fine=n_fine, frame_count=frame_count,
            sample_rate=sample_rate, hop=hop, mode=_MODE_NAMES[mode_b],
            coarse_model_id=coarse_id, fine_model_id=fine_id,
            symbol_count=symbol_count, payload=payload,
            payload_bits=8 * len(payload),
        )

    def bits_per_second(self) -> float:
        duration = self.frame_count * self.hop / self.sample_rate
        return self.payload_bits / duration if duration else 0.0


# ---------------------------------------------------------------------------
# Stream coding
# ---------------------------------------------------------------------------

class _StepTables:
    """Coding tables derived from one step distribution; the canonical
    code values and decoder are built lazily and stick to the entry, so
    cached contexts pay for them once."""

    __slots__ = ("q", "lengths", "_codes", "_decoder")

    def __init__(self, probs: np.ndarray, want_huffman: bool):
        self.q = quantize_distribution(probs)
        self.lengths = huffman_code_lengths(self.q) if want_huffman else None
        self._codes = None
        self._decoder = None

    @property
    def codes(self) -> np.ndarray:
        if self._codes is None:
            self._codes = canonical_codes(self.lengths)
        return self._codes

    @property
    def decoder(self) -> "_CanonicalDecoder":
        if self._decoder is None:
            self._decoder = _CanonicalDecoder(self.lengths)
        return self._decoder


class _StepCoder:
    """Shared per-step machinery: model session plus a table cache keyed
    by the model's context key (when it has one)."""

    def __init__(self, model: TokenModel, want_huffman: bool, cache: bool):
        self._session = model.session()
        self._want_huffman = want_huffman
        self._cache: dict | None = {} if cache else None

    def step(self, frame: int, layer: int) -> _StepTables:
        key = self._session.cache_key(frame, layer) if self._cache is not None else None
        if key is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return hit
        entry = _StepTables(self._session.predict(frame, layer), self._want_huffman)
        if key is not None:
            self._cache[key] = entry
        return entry

    def push(self, frame: int, layer: int, code: int) -> None:
        self._session.push(frame, layer, code)


class SymbolEncoder:
    """Incremental coarse-stream encoder: push symbols in flattening
    order, then :meth:`finish` to obtain the bitstream.

    The whole-file :func:`encode_stream` wraps this class, so streaming
    and one-shot encodes are bit-identical by construction.
    """

    def __init__(self, model: TokenModel, mode: str = MODE_RANGE, *, cache: bool = True):
        if mode not in _MODE_BYTES:
            raise ShapeError(f"unknown mode {mode!r}")
        if model.role != ROLE_COARSE:
            raise ContextError("only the coarse role defines a decodable stream")
        self._model = model
        self._mode = mode
        self._writer = BitWriter()
        self._coder = _StepCoder(model, want_huffman=(mode == MODE_HUFFMAN), cache=cache)
        self._range = RangeEncoder(self._writer) if mode == MODE_RANGE else None
        self._n = 0

    def push(self, symbol: int) -> None:
        symbol = int(symbol)
        if not 0 <= symbol < self._model.nc:
            raise InvalidSymbol(f"symbol {symbol} outside [0, {self._model.nc})")
        n_coarse = self._model.cfg.n_coarse
        frame, layer = self._n // n_coarse, 1 + self._n % n_coarse
        tables = self._coder.step(frame, layer)
        if self._mode == MODE_HUFFMAN:
            self._writer.write_bits(int(tables.codes[symbol]), int(tables.lengths[symbol]))
        else:
            self._range.encode(tables.q, symbol)
        self._coder.push(frame, layer, symbol)
        self._n += 1

    def finish(
        self,
        *,
        sample_rate: int = 16000,
        hop: int = 320,
        fine_model_id: bytes = ZERO_MODEL_ID,
    ) -> Bitstream:
        n_coarse = self._model.cfg.n_coarse
        if self._n % n_coarse:
            raise ShapeError(f"{self._n} symbols do not complete a frame of {n_coarse}")
        if self._range is not None and self._n:
            self._range.finish()
        return Bitstream(
            nc=self._model.nc,
            n_coarse=n_coarse,
            n_fine=self._model.cfg.n_fine,
            frame_count=self._n // n_coarse,
            sample_rate=sample_rate,
            hop=hop,
            mode=self._mode,
            coarse_model_id=self._model.model_id,
            fine_model_id=fine_model_id,
            symbol_count=self._n,
            payload=self._writer.getvalue(),
            payload_bits=self._writer.bit_count,
        )


class SymbolDecoder:
    """Incremental coarse-stream decoder over a parsed bitstream.

    The header model id is verified before any payload bit is read.
    """

    def __init__(self, b: Bitstream, model: TokenModel, *, cache: bool = True):
        if model.model_id != b.coarse_model_id:
            raise ModelMismatch(
                f"bitstream model {b.coarse_model_id.hex()} != supplied {model.model_id.hex()}"
            )
        if model.role != ROLE_COARSE:
            raise ContextError("decoding requires the coarse model")
        if b.nc != model.nc or b.n_coarse != model.cfg.n_coarse:
            raise ModelMismatch("bitstream geometry differs from the model's")
        if b.symbol_count != b.frame_count * b.n_coarse:
            raise CorruptStream("symbol count does not fill the declared frames")
        self._b = b
        self._model = model
        self._reader = BitReader(b.payload, b.payload_bits)
        self._coder = _StepCoder(model, want_huffman=(b.mode == MODE_HUFFMAN), cache=cache)
        self._range = None
        self._n = 0

    @property
    def remaining(self) -> int:
        return self._b.symbol_count - self._n

    def next_symbol(self) -> int:
        if self._n >= self._b.symbol_count:
            raise CorruptStream("stream already fully decoded")
        if self._b.mode == MODE_RANGE and self._range is None:
            self._range = RangeDecoder(self._reader)
        n_coarse = self._model.cfg.n_coarse
        frame, layer = self._n // n_coarse, 1 + self._n % n_coarse
        tables = self._coder.step(frame, layer)
        if self._b.mode == MODE_HUFFMAN:
            sym = tables.decoder.read_symbol(self._reader)
        else:
            sym = self._range.decode(tables.q)
        self._coder.push(frame, layer, sym)
        self._n += 1
        return sym


def _check_layout(model: TokenModel, layout: np.ndarray) -> None:
    layout = np.asarray(layout)
    if layout.size == 0:
        return
    frame_count = int(layout[-1, 0]) + 1
    if not np.array_equal(layout, coarse_layout(frame_count, model.cfg.n_coarse)):
        raise ShapeError("layout is not the coarse flattening of whole frames")


def encode_stream(
    symbols,
    model: TokenModel,
    layout: np.ndarray,
    mode: str = MODE_RANGE,
    *,
    sample_rate: int = 16000,
    hop: int = 320,
    fine_model_id: bytes = ZERO_MODEL_ID,
    cache: bool = True,
) -> Bitstream:
    """Entropy-code a coarse symbol stream under a model.

    A fresh distribution (and, in huffman mode, a fresh codebook) is
    derived at every symbol from the model's context so far.
    """
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    layout = np.asarray(layout)
    if symbols.size != layout.shape[0]:
        raise ShapeError(f"{symbols.size} symbols vs layout of {layout.shape[0]}")
    encoder = SymbolEncoder(model, mode, cache=cache)
    _check_layout(model, layout)
    for sym in symbols:
        encoder.push(int(sym))
    return encoder.finish(
        sample_rate=sample_rate, hop=hop, fine_model_id=fine_model_id
    )


def decode_stream(b: Bitstream, model: TokenModel, *, cache: bool = True) -> np.ndarray:
    """Losslessly recover the symbol stream of :func:`encode_stream`."""
    decoder = SymbolDecoder(b, model, cache=cache)
    out = np.empty(b.symbol_count, dtype=np.int32)
    for i in range(b.symbol_count):
        out[i] = decoder.next_symbol()
    return out


def cross_entropy_bits(model: TokenModel, symbols, layout: np.ndarray) -> float:
    """Sum of -log2 p(actual symbol) over the model's predicted
    positions of a stream: the stream's ideal code length."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    layout = np.asarray(layout)
    if symbols.size != layout.shape[0]:
        raise ShapeError(f"{symbols.size} symbols vs layout of {layout.shape[0]}")
    session = model.session()
    total = 0.0
    for sym, (frame, layer) in zip(symbols, layout):
        if model.predicts(int(layer)):
            probs = session.predict(int(frame), int(layer))
            total -= float(np.log2(probs[sym]))
        session.push(int(frame), int(layer), int(sym))
    return total


def score_stream(model: TokenModel, symbols, layout: np.ndarray, *, cache: bool = True):
    """Per-position rate accounting for reports.

    Returns (model_entropy_bits, huffman_bits, ideal_bits) arrays, one
    entry per position: the entropy of the step's distribution, the
    realized canonical-Huffman code length of the actual symbol, and
    -log2 of its quantized probability.
    """
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    layout = np.asarray(layout)
    if symbols.size != layout.shape[0]:
        raise ShapeError(f"{symbols.size} symbols vs layout of {layout.shape[0]}")
    session = model.session()
    cache_map: dict | None = {} if cache else None
    h_model = np.empty(symbols.size)
    h_huff = np.empty(symbols.size)
    h_ideal = np.empty(symbols.size)
    for i, (sym, (frame, layer)) in enumerate(zip(symbols, layout)):
        key = session.cache_key(int(frame), int(layer)) if cache_map is not None else None
        entry = cache_map.get(key) if key is not None else None
        if entry is None:
            probs = session.predict(int(frame), int(layer))
            q = quantize_distribution(probs)
            entry = (entropy_bits(probs), huffman_code_lengths(q), q)
            if key is not None:
                cache_map[key] = entry
        ent, lengths, q = entry
        h_model[i] = ent
        h_huff[i] = float(lengths[sym])
        h_ideal[i] = -np.log2(q.freqs[sym] / FREQ_TOTAL)
        session.push(int(frame), int(layer), int(sym))
    return h_model, h_huff, h_ideal
