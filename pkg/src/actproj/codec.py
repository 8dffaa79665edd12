"""Symmetric 8-bit quantization, canonical Huffman coding and bit accounting.

Symbols are signed integers in ``[-127, 127]``; Huffman tables index them
through ``symbol + 128`` into a 256-entry code-length list, which is also the
on-disk table layout of the ACBS container.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, ValidationError

QMAX = 127
N_SYMBOLS = 256
SYMBOL_OFFSET = 128
TABLE_BITS = N_SYMBOLS * 8
SCALE_BITS = 32
ACBS_MAGIC = b"ACBS"


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    qmin: int = -QMAX
    qmax: int = QMAX

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValidationError(f"quantizer scale must be positive and finite, got {self.scale}")

    @property
    def clip(self):
        """Largest magnitude representable without clipping."""
        return self.qmax * self.scale


def calibrate_quant(values):
    values = np.asarray(values)
    if values.size == 0:
        raise ValidationError("cannot calibrate a quantizer on an empty tensor")
    if not np.all(np.isfinite(values)):
        raise ValidationError("calibration values contain NaN or Inf")
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        return QuantParams(1.0)
    # float32 scale so the ACBS container stores exactly the scale in use
    return QuantParams(float(np.float32(peak / QMAX)))


def quantize(values, params):
    q = np.rint(np.asarray(values, dtype=np.float64) / params.scale)
    return np.clip(q, params.qmin, params.qmax).astype(np.int8)


def dequantize(symbols, params, dtype=np.float32):
    return (np.asarray(symbols).astype(np.float64) * params.scale).astype(dtype)


def fake_quantize(values, params):
    """Quantize-dequantize in the dtype of ``values``; returns ``(out, in_range_mask)``."""
    values = np.asarray(values)
    out = dequantize(quantize(values, params), params, dtype=values.dtype)
    mask = np.abs(values) <= params.clip
    return out, mask


def symbol_histogram(symbols):
    s = np.asarray(symbols).ravel().astype(np.int64)
    return np.bincount(s + SYMBOL_OFFSET, minlength=N_SYMBOLS)


def huffman_lengths(counts):
    """Optimal code lengths for a 256-bin histogram.

    Heap ties are broken by the smallest symbol contained in each subtree.
    A lone symbol gets a 1-bit code.
    """
    counts = np.asarray(counts, dtype=np.int64)
    lengths = np.zeros(N_SYMBOLS, dtype=np.int64)
    present = np.flatnonzero(counts)
    if present.size == 0:
        return lengths
    if present.size == 1:
        lengths[present[0]] = 1
        return lengths
    heap = [(int(counts[s]), int(s), [int(s)]) for s in present]
    heapq.heapify(heap)
    while len(heap) > 1:
        f1, m1, s1 = heapq.heappop(heap)
        f2, m2, s2 = heapq.heappop(heap)
        merged = s1 + s2
        lengths[merged] += 1
        heapq.heappush(heap, (f1 + f2, min(m1, m2), merged))
    return lengths


def payload_bits(counts, lengths=None):
    counts = np.asarray(counts, dtype=np.int64)
    if lengths is None:
        lengths = huffman_lengths(counts)
    return int(np.dot(counts, lengths))


def canonical_codes(lengths):
    """Codewords (as ints) assigned in (length, symbol) order."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = [0] * N_SYMBOLS
    order = sorted((int(l), s) for s, l in enumerate(lengths) if l > 0)
    code = 0
    prev = order[0][0] if order else 0
    for length, sym in order:
        code <<= length - prev
        codes[sym] = code
        code += 1
        prev = length
    return codes


@dataclass
class HuffmanTable:
    lengths: np.ndarray = field(default_factory=lambda: np.zeros(N_SYMBOLS, dtype=np.int64))

    @classmethod
    def from_symbols(cls, symbols):
        return cls(huffman_lengths(symbol_histogram(symbols)))

    @property
    def codes(self):
        return canonical_codes(self.lengths)

    @property
    def max_length(self):
        return int(self.lengths.max()) if self.lengths.size else 0

    def kraft_sum(self):
        ls = self.lengths[self.lengths > 0]
        return float(np.sum(2.0 ** (-ls.astype(np.float64))))

    def codeword(self, symbol):
        idx = int(symbol) + SYMBOL_OFFSET
        length = int(self.lengths[idx])
        if length == 0:
            raise KeyError(f"symbol {symbol} has no codeword")
        return format(self.codes[idx], f"0{length}b")

    def _bit_matrix(self):
        width = max(self.max_length, 1)
        mat = np.zeros((N_SYMBOLS, width), dtype=np.uint8)
        for s, (code, length) in enumerate(zip(self.codes, self.lengths)):
            for j in range(int(length)):
                mat[s, j] = (code >> (int(length) - 1 - j)) & 1
        return mat


def huffman_encode(symbols, table=None, chunk=1 << 16):
    """Encode an int symbol stream; returns ``(table, bits)`` with ``bits`` a uint8 0/1 array."""
    idx = np.asarray(symbols).ravel().astype(np.int64) + SYMBOL_OFFSET
    if idx.size == 0:
        return HuffmanTable(), np.zeros(0, dtype=np.uint8)
    if table is None:
        table = HuffmanTable(huffman_lengths(np.bincount(idx, minlength=N_SYMBOLS)))
    lengths = table.lengths
    if np.any(lengths[idx] == 0):
        raise ValidationError("stream contains symbols missing from the table")
    mat = table._bit_matrix()
    cols = np.arange(mat.shape[1])
    pieces = []
    for start in range(0, idx.size, chunk):
        part = idx[start:start + chunk]
        pieces.append(mat[part][cols[None, :] < lengths[part][:, None]])
    return table, np.concatenate(pieces)


LUT_MAX_BITS = 16


def _decode_by_lookup(table, bits, max_len):
    """Symbol and code length starting at every bit position, via a 2**max_len table."""
    nbits = bits.size
    lut_sym = np.full(1 << max_len, -1, dtype=np.int32)
    lut_len = np.zeros(1 << max_len, dtype=np.int32)
    for sym, (code, length) in enumerate(zip(table.codes, table.lengths)):
        if length:
            shift = max_len - int(length)
            lut_sym[code << shift:(code + 1) << shift] = sym
            lut_len[code << shift:(code + 1) << shift] = length
    packed = np.concatenate([np.packbits(bits.astype(np.uint8)), np.zeros(4, dtype=np.uint8)]).astype(np.uint32)
    pos = np.arange(nbits, dtype=np.uint32)
    byte = pos >> 3
    word = (packed[byte] << 24) | (packed[byte + 1] << 16) | (packed[byte + 2] << 8) | packed[byte + 3]
    # at most 7 + LUT_MAX_BITS bits are needed, so one 32-bit word always suffices
    window = (word << (pos & 7)) >> (32 - max_len)
    return lut_sym[window], lut_len[window]


def _decode_by_walk(table, bits, max_len):
    """Same as :func:`_decode_by_lookup` without the table, for long codes."""
    nbits = bits.size
    lengths = np.asarray(table.lengths, dtype=np.int64)
    padded = np.concatenate([bits.astype(np.int32), np.zeros(max_len + 1, dtype=np.int32)])
    by_len = [[] for _ in range(max_len + 1)]
    for s in range(N_SYMBOLS):
        if lengths[s]:
            by_len[int(lengths[s])].append(s)
    n_at = np.array([len(v) for v in by_len], dtype=np.int32)
    sorted_syms = np.array([s for v in by_len for s in v], dtype=np.int32)
    first_index = np.concatenate([[0], np.cumsum(n_at)])[:-1]

    sym_at = np.full(nbits, -1, dtype=np.int32)
    len_at = np.zeros(nbits, dtype=np.int32)
    pos = np.arange(nbits, dtype=np.int32)
    # offset of the window's value from the first code of the current length;
    # stays below the node count at that depth, so it never overflows
    offset = padded[pos]
    for length in range(1, max_len + 1):
        hit = offset < n_at[length]
        if np.any(hit):
            p = pos[hit]
            sym_at[p] = sorted_syms[first_index[length] + offset[hit]]
            len_at[p] = length
            keep = ~hit
            pos = pos[keep]
            offset = offset[keep]
        if pos.size == 0:
            break
        offset = 2 * (offset - n_at[length]) + padded[pos + length]
    return sym_at, len_at


def huffman_decode(table, bits, count):
    """Decode ``count`` symbols from a 0/1 bit array produced by :func:`huffman_encode`.

    Every bit position is decoded speculatively, then the true codeword
    boundaries are recovered by chasing the next-codeword pointers.
    """
    bits = np.asarray(bits)
    if count == 0:
        if bits.size:
            raise ValidationError("trailing bits after an empty stream")
        return np.zeros(0, dtype=np.int8)
    max_len = table.max_length
    if max_len == 0:
        raise ValidationError("empty table cannot decode a non-empty stream")
    nbits = bits.size
    if nbits == 0:
        raise ValidationError("bit stream is truncated or corrupt")
    decode = _decode_by_lookup if max_len <= LUT_MAX_BITS else _decode_by_walk
    sym_at, len_at = decode(table, bits, max_len)

    nxt = np.empty(nbits + 1, dtype=np.int32)
    nxt[:nbits] = np.where(len_at > 0, np.minimum(np.arange(nbits, dtype=np.int32) + len_at, nbits), nbits)
    nxt[nbits] = nbits
    valid = np.concatenate([len_at > 0, [False]])

    # hop 16 codewords at a time to find every 16th boundary, then fill the
    # gaps with 16 vectorised single hops
    stride_log = 4
    stride = 1 << stride_log
    jump = nxt
    for _ in range(stride_log):
        jump = jump[jump]
    n_blocks = -(-count // stride)
    starts = np.empty(n_blocks, dtype=np.int32)
    p = 0
    for b in range(n_blocks):
        starts[b] = p
        p = jump[p]
    lanes = np.empty((stride, n_blocks), dtype=np.int32)
    cur = starts
    for i in range(stride):
        lanes[i] = cur
        cur = nxt[cur]
    visited = lanes.T.ravel()[:count]
    if not np.all(valid[visited]):
        raise ValidationError("bit stream is truncated or corrupt")
    end = nxt[visited[-1]]
    if end != nbits or visited[-1] + len_at[visited[-1]] != nbits:
        raise ValidationError(f"decoded {count} symbols but consumed {end} of {nbits} bits")
    return (sym_at[visited] - SYMBOL_OFFSET).astype(np.int8)


@dataclass
class LayerBits:
    layer: int
    symbols: int
    raw_values: int
    payload: int
    table: int = TABLE_BITS
    scale: int = SCALE_BITS

    @property
    def total(self):
        return self.payload + self.table + self.scale


@dataclass
class BitReport:
    layers: list

    @property
    def layer_bits(self):
        return [lb.total for lb in self.layers]

    @property
    def total_bits(self):
        return sum(self.layer_bits)

    @property
    def payload_bits(self):
        return sum(lb.payload for lb in self.layers)

    @property
    def raw_values(self):
        return sum(lb.raw_values for lb in self.layers)

    @property
    def bits_per_value(self):
        return self.total_bits / self.raw_values if self.raw_values else 0.0

    @property
    def payload_bits_per_value(self):
        return self.payload_bits / self.raw_values if self.raw_values else 0.0

    @property
    def compression_ratio(self):
        return 8.0 * self.raw_values / self.total_bits if self.total_bits else float("inf")


def layer_bits(symbols, layer=0, raw_values=None):
    symbols = np.asarray(symbols)
    return LayerBits(
        layer=layer,
        symbols=int(symbols.size),
        raw_values=int(symbols.size if raw_values is None else raw_values),
        payload=payload_bits(symbol_histogram(symbols)),
    )


def bit_account(coded, params, raw_values=None):
    """B(.) over a list of per-layer coded tensors, quantized with per-layer params.

    ``raw_values`` gives each layer's uncompressed element count (defaults to
    the coded size) and drives bits-per-value and the compression ratio.
    """
    if len(coded) != len(params):
        raise ShapeError("need exactly one quantizer per coded layer")
    if raw_values is None:
        raw_values = [np.asarray(c).size for c in coded]
    reports = []
    for l, (values, qp, raw) in enumerate(zip(coded, params, raw_values)):
        reports.append(layer_bits(quantize(values, qp), layer=l, raw_values=raw))
    return BitReport(reports)


def raw_report(raw_values):
    """Uncompressed 8-bit storage with no table overhead."""
    return BitReport([LayerBits(l, n, n, 8 * n, 0, 0) for l, n in enumerate(raw_values)])


def write_acbs(fh, layer_id, symbols, scale):
    symbols = np.asarray(symbols).ravel()
    table, bits = huffman_encode(symbols)
    lengths = table.lengths
    if lengths.max(initial=0) > 255:
        raise ValidationError("code length does not fit a u8 table entry")
    fh.write(ACBS_MAGIC)
    fh.write(struct.pack("<IIf", layer_id, symbols.size, scale))
    fh.write(lengths.astype(np.uint8).tobytes())
    fh.write(struct.pack("<I", bits.size))
    fh.write(np.packbits(bits.astype(np.uint8)).tobytes())


def read_acbs(fh):
    """Returns ``(layer_id, symbols, scale)``."""
    head = fh.read(16)
    if head[:4] != ACBS_MAGIC:
        raise ValidationError("not an ACBS container")
    layer_id, count, scale = struct.unpack("<IIf", head[4:16])
    lengths = np.frombuffer(fh.read(N_SYMBOLS), dtype=np.uint8).astype(np.int64)
    (nbits,) = struct.unpack("<I", fh.read(4))
    packed = np.frombuffer(fh.read((nbits + 7) // 8), dtype=np.uint8)
    bits = np.unpackbits(packed)[:nbits]
    symbols = huffman_decode(HuffmanTable(lengths), bits, count)
    return layer_id, symbols, scale
