"""End-to-end gradient compression pipeline and its wire format.

Per chunk of the input vector: (optional binary16 round trip) ->
forward DFT -> magnitude truncation -> per-part quantization of the
interleaved re/im coefficient stream -> stream compaction by zero code
-> serialization.  Decompression applies the exact inverse stages in
reverse order.

Wire format (all multi-byte integers little-endian)::

    magic  "FGC1"            4 bytes
    version                  u8   (currently 1)
    flags                    u8   bit0 half pass, bit1 energy mode,
                                  bit2 passthrough quantizer
    original_len             u64
    chunk_size               u32
    theta                    f32
    quantizer min, max, eps  f32 x 3   (zeros in passthrough mode)
    quantizer N, m           u8  x 2   (N=32, m=0 in passthrough mode)
    per chunk:
        kept count           u32
        occupancy bitmap     ceil(slots / 8) bytes, MSB-first per byte
        packed codes         ceil(kept * N / 8) bytes, LSB-first per byte

A chunk of length L has ``L // 2 + 1`` frequency bins and therefore
``slots = 2 * (L // 2 + 1)`` quantized scalars (re, im interleaved).
The passthrough mode (N=32) stores raw IEEE-754 single bit patterns so
sparsification can be evaluated without quantization error.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .packer import PackedSparse, bitmap_from_bytes, bitmap_to_bytes, pack, unpack
from .quantizer import QuantizerConfig, decode_array, encode_array, pack_codes, tune_eps, unpack_codes
from .spectral import SparsificationSpec, Spectrum, bin_weights, dft_forward, dft_inverse, half_round_trip, truncate

__all__ = [
    "CodecConfig",
    "ChunkPayload",
    "CompressedMessage",
    "CodecFormatError",
    "CorruptHeaderError",
    "TruncatedPayloadError",
    "BitmapMismatchError",
    "compress",
    "decompress",
    "reconstruct",
    "reconstruct_rows",
    "serialize",
    "deserialize",
    "calibrate",
    "compression_ratio",
]

MAGIC = b"FGC1"
VERSION = 1
FLAG_HALF_PASS = 0x01
FLAG_ENERGY = 0x02
FLAG_PASSTHROUGH = 0x04

_HEADER = struct.Struct("<4sBBQIffffBB")
_KEPT = struct.Struct("<I")

HEADER_BYTES = _HEADER.size  # 36

MIN_CHUNK_SIZE = 16
DEFAULT_CHUNK_SIZE = 1 << 16


class CodecFormatError(ValueError):
    """Malformed compressed data."""


class CorruptHeaderError(CodecFormatError):
    """Header failed validation (magic, version, flags, or parameters)."""


class TruncatedPayloadError(CodecFormatError):
    """Buffer ended before the declared payload was complete."""


class BitmapMismatchError(CodecFormatError):
    """Occupancy bitmap popcount disagrees with the dense payload length."""


@dataclass(frozen=True)
class CodecConfig:
    """Pipeline parameters; ``quantizer=None`` selects passthrough f32."""

    sparsification: SparsificationSpec
    quantizer: QuantizerConfig | None = None
    half_precision_pass: bool = False
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self) -> None:
        if self.chunk_size < MIN_CHUNK_SIZE:
            raise ValueError(f"chunk_size must be >= {MIN_CHUNK_SIZE}, got {self.chunk_size}")
        if self.sparsification.domain != "frequency":
            raise ValueError("codec sparsification must operate in the frequency domain")

    @property
    def n_bits(self) -> int:
        return 32 if self.quantizer is None else self.quantizer.n_bits


@dataclass(eq=False)
class ChunkPayload:
    """One chunk on the wire: occupancy bitmap over the re/im slots plus
    the surviving codes in slot order."""

    bitmap: np.ndarray  # bool, one flag per quantized scalar slot
    codes: np.ndarray   # uint32, the non-zero codes

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChunkPayload):
            return NotImplemented
        return np.array_equal(self.bitmap, other.bitmap) and np.array_equal(
            self.codes, other.codes
        )


@dataclass(eq=False)
class CompressedMessage:
    """Parsed form of one compressed gradient; the header fields fully
    determine the decode path."""

    original_len: int
    chunk_size: int
    theta: float
    mode: str
    half_pass: bool
    quantizer: QuantizerConfig | None
    chunks: list[ChunkPayload] = field(default_factory=list)

    @property
    def passthrough(self) -> bool:
        return self.quantizer is None

    @property
    def n_bits(self) -> int:
        return 32 if self.quantizer is None else self.quantizer.n_bits

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedMessage):
            return NotImplemented
        return (
            self.original_len == other.original_len
            and self.chunk_size == other.chunk_size
            and self.theta == other.theta
            and self.mode == other.mode
            and self.half_pass == other.half_pass
            and self.quantizer == other.quantizer
            and self.chunks == other.chunks
        )


def _chunk_lengths(n: int, chunk_size: int) -> list[int]:
    lengths = [chunk_size] * (n // chunk_size)
    if n % chunk_size:
        lengths.append(n % chunk_size)
    return lengths


def _slot_count(chunk_len: int) -> int:
    return 2 * (chunk_len // 2 + 1)


def _quantize_parts(parts: np.ndarray, quantizer: QuantizerConfig | None) -> np.ndarray:
    """f64 scalars -> uint32 codes (raw f32 bit patterns in passthrough)."""
    if quantizer is None:
        p32 = parts.astype(np.float32)
        p32[p32 == 0.0] = 0.0  # fold -0.0 so it packs as an empty slot
        return p32.view(np.uint32)
    return encode_array(quantizer, parts)


def _dequantize_codes(codes: np.ndarray, quantizer: QuantizerConfig | None) -> np.ndarray:
    if quantizer is None:
        return codes.astype(np.uint32).view(np.float32).astype(np.float64)
    return decode_array(quantizer, codes).astype(np.float64)


def _requantize_parts(parts: np.ndarray, quantizer: QuantizerConfig | None) -> np.ndarray:
    """Value-equal shortcut for dequantize(quantize(parts)) that skips the
    integer code representation (reconstruction paths only)."""
    if quantizer is None:
        return parts.astype(np.float32).astype(np.float64)
    return decode_array(quantizer, encode_array(quantizer, parts)).astype(np.float64)


def _interleave(coefficients: np.ndarray) -> np.ndarray:
    shape = coefficients.shape[:-1] + (2 * coefficients.shape[-1],)
    parts = np.empty(shape, dtype=np.float64)
    parts[..., 0::2] = coefficients.real
    parts[..., 1::2] = coefficients.imag
    return parts


def _deinterleave(parts: np.ndarray) -> np.ndarray:
    return parts[..., 0::2] + 1j * parts[..., 1::2]


def _chunk_codes(chunk: np.ndarray, config: CodecConfig) -> np.ndarray:
    """Run one chunk forward to its full (unpacked) code-slot array."""
    if config.half_precision_pass:
        chunk = half_round_trip(chunk)
        if not np.isfinite(chunk).all():
            raise ValueError("gradient overflowed binary16 during the half-precision pass")
    spectrum = dft_forward(chunk)
    truncated, _ = truncate(spectrum, config.sparsification)
    return _quantize_parts(_interleave(truncated.coefficients), config.quantizer)


def compress(gradient, config: CodecConfig) -> CompressedMessage:
    """Compress a dense gradient vector into a message."""
    v = np.asarray(gradient, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("gradient must be a non-empty 1D sequence")
    if not np.isfinite(v).all():
        raise ValueError("gradient must be finite")

    chunks = []
    offset = 0
    for length in _chunk_lengths(v.size, config.chunk_size):
        codes = _chunk_codes(v[offset : offset + length], config)
        packed = pack(codes)
        chunks.append(ChunkPayload(bitmap=packed.bitmap, codes=packed.dense))
        offset += length
    return CompressedMessage(
        original_len=v.size,
        chunk_size=config.chunk_size,
        theta=float(np.float32(config.sparsification.theta)),
        mode=config.sparsification.mode,
        half_pass=config.half_precision_pass,
        quantizer=config.quantizer,
        chunks=chunks,
    )


def decompress(message: CompressedMessage) -> np.ndarray:
    """Invert :func:`compress`: unpack, dequantize, inverse-transform, join."""
    lengths = _chunk_lengths(message.original_len, message.chunk_size)
    if len(lengths) != len(message.chunks):
        raise TruncatedPayloadError(
            f"message has {len(message.chunks)} chunks, expected {len(lengths)}"
        )
    out = np.empty(message.original_len, dtype=np.float64)
    offset = 0
    for length, chunk in zip(lengths, message.chunks):
        slots = _slot_count(length)
        if chunk.bitmap.size != slots:
            raise BitmapMismatchError(
                f"bitmap covers {chunk.bitmap.size} slots, expected {slots}"
            )
        if int(np.count_nonzero(chunk.bitmap)) != chunk.codes.size:
            raise BitmapMismatchError(
                f"bitmap marks {int(np.count_nonzero(chunk.bitmap))} slots "
                f"but payload has {chunk.codes.size} codes"
            )
        codes = unpack(PackedSparse(chunk.bitmap, chunk.codes, slots))
        parts = _dequantize_codes(codes, message.quantizer)
        out[offset : offset + length] = dft_inverse(Spectrum(_deinterleave(parts), length))
        offset += length
    return out


def reconstruct(gradient, config: CodecConfig) -> np.ndarray:
    """decompress(compress(gradient, config)) without touching the wire.

    Stream compaction and serialization are lossless, so skipping them
    yields bit-identical output; this is the fast path for simulations.
    """
    v = np.asarray(gradient, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("gradient must be a non-empty 1D sequence")
    out = np.empty_like(v)
    offset = 0
    for length in _chunk_lengths(v.size, config.chunk_size):
        codes = _chunk_codes(v[offset : offset + length], config)
        parts = _dequantize_codes(codes, config.quantizer)
        out[offset : offset + length] = dft_inverse(Spectrum(_deinterleave(parts), length))
        offset += length
    return out


def reconstruct_rows(rows: np.ndarray, config: CodecConfig) -> np.ndarray:
    """Row-wise :func:`reconstruct` of a 2D array in one vectorized pass.

    Bit-identical to calling ``reconstruct`` on each row (the batched FFT
    and row-wise selections match the single-vector code paths exactly);
    asserted by the test suite.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] == 0:
        raise ValueError("rows must be a non-empty 2D array")
    spars = config.sparsification
    n_rows = rows.shape[0]
    row_index = np.arange(n_rows)[:, None]
    out = np.empty_like(rows)
    offset = 0
    for length in _chunk_lengths(rows.shape[1], config.chunk_size):
        block = rows[:, offset : offset + length]
        if config.half_precision_pass:
            block = half_round_trip(block)
            if not np.isfinite(block).all():
                raise ValueError("gradient overflowed binary16 during the half-precision pass")
        spectra = np.fft.rfft(block, axis=1)
        bins = spectra.shape[1]
        magnitudes = np.abs(spectra)
        order = np.argsort(magnitudes, kind="stable", axis=1)
        if spars.mode == "count":
            keep_sorted = np.arange(bins) >= int(np.ceil(spars.theta * bins))
        elif spars.theta == 0.0:
            keep_sorted = np.ones(bins, dtype=bool)
        else:
            energies = bin_weights(length) * magnitudes**2
            cumulative = np.cumsum(np.take_along_axis(energies, order, axis=1), axis=1)
            budgets = spars.theta**2 * energies.sum(axis=1, keepdims=True)
            drop_counts = (cumulative <= budgets).sum(axis=1)
            keep_sorted = np.arange(bins)[None, :] >= drop_counts[:, None]
        mask = np.empty((n_rows, bins), dtype=bool)
        mask[row_index, order] = keep_sorted
        spectra[~mask] = 0.0
        # complex128 memory is (re, im) float64 pairs: the view IS the
        # interleaved slot stream, no copies needed
        parts = _requantize_parts(spectra.view(np.float64), config.quantizer)
        out[:, offset : offset + length] = np.fft.irfft(
            parts.view(np.complex128), n=length, axis=1
        )
        offset += length
    return out


def serialize(message: CompressedMessage) -> bytes:
    """Encode a message into its canonical byte representation."""
    flags = 0
    if message.half_pass:
        flags |= FLAG_HALF_PASS
    if message.mode == "energy":
        flags |= FLAG_ENERGY
    q = message.quantizer
    if q is None:
        flags |= FLAG_PASSTHROUGH
        qmin = qmax = qeps = 0.0
        n_bits, m_bits = 32, 0
    else:
        qmin, qmax, qeps = q.min, q.max, q.eps
        n_bits, m_bits = q.n_bits, q.mantissa_bits
    blob = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            flags,
            message.original_len,
            message.chunk_size,
            message.theta,
            qmin,
            qmax,
            qeps,
            n_bits,
            m_bits,
        )
    ]
    for chunk in message.chunks:
        blob.append(_KEPT.pack(chunk.codes.size))
        blob.append(bitmap_to_bytes(chunk.bitmap))
        blob.append(pack_codes(chunk.codes, message.n_bits))
    return b"".join(blob)


def deserialize(data: bytes) -> CompressedMessage:
    """Parse bytes produced by :func:`serialize`, validating as it goes."""
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"buffer of {len(data)} bytes is shorter than the header")
    magic, version, flags, original_len, chunk_size, theta, qmin, qmax, qeps, n_bits, m_bits = (
        _HEADER.unpack_from(data, 0)
    )
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptHeaderError(f"unsupported version {version}")
    if flags & ~(FLAG_HALF_PASS | FLAG_ENERGY | FLAG_PASSTHROUGH):
        raise CorruptHeaderError(f"unknown flag bits in 0x{flags:02x}")
    if original_len < 1:
        raise CorruptHeaderError("original_len must be >= 1")
    if chunk_size < MIN_CHUNK_SIZE:
        raise CorruptHeaderError(f"chunk_size {chunk_size} below minimum {MIN_CHUNK_SIZE}")
    if not (np.isfinite(theta) and 0.0 <= theta <= 1.0):
        raise CorruptHeaderError(f"theta {theta} outside [0, 1]")
    passthrough = bool(flags & FLAG_PASSTHROUGH)
    if passthrough:
        if n_bits != 32:
            raise CorruptHeaderError("passthrough flag requires N=32")
        quantizer = None
    else:
        try:
            quantizer = QuantizerConfig.from_params(qmin, qmax, n_bits, m_bits, qeps)
        except ValueError as exc:
            raise CorruptHeaderError(f"invalid quantizer parameters: {exc}") from exc

    message = CompressedMessage(
        original_len=original_len,
        chunk_size=chunk_size,
        theta=theta,
        mode="energy" if flags & FLAG_ENERGY else "count",
        half_pass=bool(flags & FLAG_HALF_PASS),
        quantizer=quantizer,
    )
    offset = _HEADER.size
    for length in _chunk_lengths(original_len, chunk_size):
        slots = _slot_count(length)
        if offset + _KEPT.size > len(data):
            raise TruncatedPayloadError("buffer ended before chunk header")
        (kept,) = _KEPT.unpack_from(data, offset)
        offset += _KEPT.size
        bitmap_bytes = (slots + 7) // 8
        if offset + bitmap_bytes > len(data):
            raise TruncatedPayloadError("buffer ended inside the bitmap")
        bitmap = bitmap_from_bytes(data[offset : offset + bitmap_bytes], slots)
        offset += bitmap_bytes
        if int(np.count_nonzero(bitmap)) != kept:
            raise BitmapMismatchError(
                f"bitmap marks {int(np.count_nonzero(bitmap))} slots, header says {kept}"
            )
        code_bytes = (kept * (32 if passthrough else n_bits) + 7) // 8
        if offset + code_bytes > len(data):
            raise TruncatedPayloadError("buffer ended inside the packed codes")
        codes = unpack_codes(
            data[offset : offset + code_bytes], 32 if passthrough else n_bits, kept
        )
        offset += code_bytes
        message.chunks.append(ChunkPayload(bitmap=bitmap, codes=codes))
    if offset != len(data):
        raise CodecFormatError(f"{len(data) - offset} unexpected trailing bytes")
    return message


def calibrate(
    sample_gradients,
    n_bits: int,
    mantissa_bits: int,
    eps_init: float = 0.002,
) -> QuantizerConfig:
    """Size the quantizer range from sampled gradient spectra.

    Takes the largest |re| or |im| coefficient over all samples,
    symmetrizes the range to [-r, r], and tunes eps for it.
    """
    peak = 0.0
    count = 0
    for sample in sample_gradients:
        v = np.asarray(sample, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("each sample must be a non-empty 1D sequence")
        if not np.isfinite(v).all():
            raise ValueError("samples must be finite")
        spectrum = np.fft.rfft(v)
        peak = max(peak, float(np.abs(spectrum.real).max()), float(np.abs(spectrum.imag).max()))
        count += 1
    if count == 0:
        raise ValueError("calibration needs at least one sample")
    if peak == 0.0:
        raise ValueError("cannot calibrate from all-zero samples")
    return tune_eps(-peak, peak, n_bits, mantissa_bits, eps_init)


def compression_ratio(config: CodecConfig, n: int, include_bitmap: bool = False) -> float:
    """Analytic ratio of the raw 32-bit size to the message size.

    Excluding bitmap and headers the ratio is exactly ``32 / (N * (1 -
    theta))``.  Including them, each chunk pays one bitmap bit per
    quantized slot plus its fixed framing.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    theta = config.sparsification.theta
    n_bits = config.n_bits
    if not include_bitmap:
        if theta >= 1.0:
            raise ValueError("ratio is unbounded at theta = 1 without bitmap accounting")
        return 32.0 / (n_bits * (1.0 - theta))
    total_bits = HEADER_BYTES * 8
    for length in _chunk_lengths(n, config.chunk_size):
        slots = _slot_count(length)
        kept = (1.0 - theta) * slots
        total_bits += _KEPT.size * 8 + math.ceil(slots / 8) * 8 + n_bits * kept
    return 32.0 * n / total_bits
