"""Range-based N-bit minifloat codec.

A 32-bit IEEE-754 single keeps 8 exponent and 23 mantissa bits; gradient
values live in a narrow, known range, so most of those bits are wasted.
This module maps floats in a caller-supplied range [min, max] onto 2**N
codes by keeping the sign, the full exponent field, and only the top m
mantissa bits, then storing the result as an offset from the bit pattern
of the smallest representable magnitude ``eps``:

    pbase = bits_f32(eps) >> (23 - m)
    code(x) = (bits_f32(x) >> (23 - m)) - pbase + 1        (positive x)

Code layout: code 0 is reserved for exact zero, codes 1..P are the
positive values in increasing magnitude (code 1 decodes to eps), and
codes P+1..2**N-1 are the negative values in increasing magnitude, so
the all-ones code is the most negative representable number.  Because
only the exponent grows across codes, the spacing between consecutive
representable values doubles after every 2**m codes: the lattice is
dense near zero and sparse near the range ends, matching the roughly
normal distribution of gradients.

Rounding inside a spacing step is truncation toward zero (a pure bit
shift); magnitudes below eps flush to code 0; values outside the range
clamp to the nearest representable end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantizerConfig",
    "tune_eps",
    "encode",
    "decode",
    "encode_array",
    "decode_array",
    "encode_block",
    "decode_block",
    "pack_codes",
    "unpack_codes",
]

# eps must stay a normal float32: denormals would break the shifted-exponent
# arithmetic, and anything >= max leaves no room for positive codes.
MIN_EPS = 2.0 ** -126

# bit pattern of the largest finite float32; no lattice point may sit above
# this after the (23 - m) shift or codes would wrap into the sign bit
MAX_F32_PATTERN = 0x7F7FFFFF

TUNE_MAX_ITERS = 64


def _f32_bits(x: float) -> int:
    return int(np.float32(x).view(np.uint32))


def _bits_f32(pattern: int) -> float:
    return float(np.uint32(pattern).view(np.float32))


def _lattice_truncate(x: float, mantissa_bits: int) -> float:
    """Clear the low (23 - m) mantissa bits of x, making it representable."""
    shift = 23 - mantissa_bits
    return _bits_f32((_f32_bits(x) >> shift) << shift)


@dataclass(frozen=True)
class QuantizerConfig:
    """Parameters of one range-based N-bit float lattice.

    ``pbase`` and ``pos_count`` are derived from the five primitive fields;
    use :meth:`from_params` so they stay consistent. ``eps`` is always a
    lattice point (its low 23-m mantissa bits are zero), hence code 1
    decodes to exactly eps.
    """

    min: float
    max: float
    n_bits: int
    mantissa_bits: int
    eps: float
    pbase: int
    pos_count: int

    def __post_init__(self) -> None:
        n, m = self.n_bits, self.mantissa_bits
        if not (2 <= n <= 16):
            raise ValueError(f"n_bits must be in [2, 16], got {n}")
        if not (1 <= m < n):
            raise ValueError(f"mantissa_bits must satisfy 1 <= m < n_bits, got m={m}, N={n}")
        if not (np.isfinite(self.min) and np.isfinite(self.max)):
            raise ValueError("min/max must be finite")
        if not (self.min < 0.0 < self.max):
            raise ValueError(f"range must straddle zero, got [{self.min}, {self.max}]")
        if not (0.0 < self.eps < self.max):
            raise ValueError(f"eps must be in (0, max), got {self.eps}")
        if self.pbase != _f32_bits(self.eps) >> (23 - m):
            raise ValueError("pbase inconsistent with eps")
        if not (1 <= self.pos_count <= 2**n - 2):
            raise ValueError("config leaves no room for positive or negative codes")
        if self.pbase + self.neg_count - 1 > MAX_F32_PATTERN >> (23 - m):
            raise ValueError("negative lattice runs past the float32 range")

    @classmethod
    def from_params(
        cls,
        min: float,
        max: float,
        n_bits: int,
        mantissa_bits: int,
        eps: float,
    ) -> "QuantizerConfig":
        """Derive pbase and the positive-code count from the primitives.

        Bounds are rounded through float32 so a config survives the f32
        wire header unchanged.
        """
        shift = 23 - mantissa_bits
        eps = _lattice_truncate(eps, mantissa_bits)
        pbase = _f32_bits(eps) >> shift
        top = _f32_bits(max) >> shift
        pos_count = top - pbase + 1
        return cls(
            float(np.float32(min)),
            float(np.float32(max)),
            n_bits,
            mantissa_bits,
            eps,
            pbase,
            pos_count,
        )

    @property
    def neg_count(self) -> int:
        return 2**self.n_bits - 1 - self.pos_count

    @property
    def actual_min(self) -> float:
        """Decoded value of the all-ones code: the most negative representable."""
        shift = 23 - self.mantissa_bits
        return -_bits_f32((self.pbase + self.neg_count - 1) << shift)

    @property
    def actual_max(self) -> float:
        """Decoded value of code P: max truncated onto the lattice."""
        shift = 23 - self.mantissa_bits
        return _bits_f32((self.pbase + self.pos_count - 1) << shift)


def tune_eps(
    min: float,
    max: float,
    n_bits: int,
    mantissa_bits: int,
    eps_init: float = 0.002,
) -> QuantizerConfig:
    """Search the eps that balances positive and negative code coverage.

    Halve eps while the all-ones code decodes below ``min``, double it
    while it decodes above, and stop at the first crossing (or after 64
    steps), keeping the candidate whose most negative representable value
    lands closest to ``min``.
    """
    if not (np.isfinite(min) and np.isfinite(max) and min < 0.0 < max):
        raise ValueError(f"bounds must be finite with min < 0 < max, got [{min}, {max}]")
    if not (2 <= n_bits <= 16):
        raise ValueError(f"n_bits must be in [2, 16], got {n_bits}")
    if not (1 <= mantissa_bits < n_bits):
        raise ValueError(
            f"mantissa_bits must satisfy 1 <= m < N, got m={mantissa_bits}, N={n_bits}"
        )
    if not (np.isfinite(eps_init) and eps_init > 0.0):
        raise ValueError(f"eps_init must be positive and finite, got {eps_init}")

    shift = 23 - mantissa_bits
    top = _f32_bits(max) >> shift
    max_pattern = MAX_F32_PATTERN >> shift

    eps = _lattice_truncate(np.clip(eps_init, MIN_EPS, np.nextafter(np.float32(max), 0.0)),
                            mantissa_bits)
    best: QuantizerConfig | None = None
    best_gap = np.inf
    prev_diff: float | None = None

    for _ in range(TUNE_MAX_ITERS):
        pbase = _f32_bits(eps) >> shift
        neg_count = 2**n_bits - 2 - (top - pbase)
        if neg_count < 1:
            eps *= 2.0  # every code went positive: eps too small for the range
            prev_diff = None
            continue
        if pbase + neg_count - 1 > max_pattern:
            eps /= 2.0  # negative lattice would spill past float32: eps too large
            prev_diff = None
            continue
        cfg = QuantizerConfig.from_params(min, max, n_bits, mantissa_bits, eps)
        diff = cfg.actual_min - min
        if abs(diff) < best_gap:
            best, best_gap = cfg, abs(diff)
        if diff == 0.0:
            return cfg
        if prev_diff is not None and (diff > 0.0) != (prev_diff > 0.0):
            break  # crossed min between consecutive steps
        prev_diff = diff
        eps = eps / 2.0 if diff < 0.0 else eps * 2.0
        if not (MIN_EPS < eps < max):
            break
    if best is None:
        raise ValueError("eps tuning found no valid configuration")
    return best


def encode_array(config: QuantizerConfig, values: np.ndarray) -> np.ndarray:
    """Vectorized encode; returns uint32 codes in [0, 2**N)."""
    x = np.asarray(values, dtype=np.float32)
    if np.isnan(x).any():
        raise ValueError("cannot encode NaN")
    shift = np.uint32(23 - config.mantissa_bits)
    p, q = config.pos_count, config.neg_count

    def offsets(magnitude_cap: float) -> np.ndarray:
        mag = np.minimum(np.abs(x), np.float32(magnitude_cap))
        return (mag.view(np.uint32) >> shift).astype(np.int64) - config.pbase + 1

    # each side clamps at its own representable end before the bit shift
    codes = np.where(
        x > 0,
        np.minimum(offsets(config.max), p),
        p + np.minimum(offsets(-config.actual_min), q),
    )
    codes[np.abs(x) < np.float32(config.eps)] = 0
    return codes.astype(np.uint32)


def decode_array(config: QuantizerConfig, codes: np.ndarray) -> np.ndarray:
    """Vectorized inverse of :func:`encode_array`; returns float32 values."""
    c = np.asarray(codes)
    if c.size and (c.max() >= 2**config.n_bits or c.min() < 0):
        raise ValueError(f"code out of range for N={config.n_bits}")
    c = c.astype(np.int64)
    shift = np.uint32(23 - config.mantissa_bits)
    p = config.pos_count

    magnitude_index = np.where(c <= p, c, c - p)
    pattern = ((config.pbase + magnitude_index - 1) << shift).astype(np.uint32)
    values = pattern.view(np.float32).copy()
    np.negative(values, where=c > p, out=values)
    values[c == 0] = 0.0
    return values


def encode(config: QuantizerConfig, x: float) -> int:
    """Encode one finite float to its N-bit code."""
    return int(encode_array(config, np.array([x]))[0])


def decode(config: QuantizerConfig, code: int) -> float:
    """Decode one N-bit code back to a float."""
    return float(decode_array(config, np.array([code]))[0])


def pack_codes(codes: np.ndarray, n_bits: int) -> bytes:
    """Pack codes n_bits each into bytes, little-endian within each byte."""
    codes = np.asarray(codes, dtype=np.uint32)
    if codes.size == 0:
        return b""
    bit_idx = np.arange(n_bits, dtype=np.uint32)
    bits = ((codes[:, None] >> bit_idx) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, n_bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes` for a known element count."""
    if count == 0:
        return np.zeros(0, dtype=np.uint32)
    need = (count * n_bits + 7) // 8
    if len(data) < need:
        raise ValueError(f"packed code buffer too short: {len(data)} < {need} bytes")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bits = bits[: count * n_bits].reshape(count, n_bits).astype(np.uint32)
    return (bits << np.arange(n_bits, dtype=np.uint32)).sum(axis=1, dtype=np.uint32)


def encode_block(config: QuantizerConfig, values) -> bytes:
    """Encode a sequence element-wise and bit-pack the codes in order."""
    arr = np.asarray(values, dtype=np.float64)
    bad = np.flatnonzero(np.isnan(arr))
    if bad.size:
        raise ValueError(f"cannot encode NaN at index {bad[0]}")
    return pack_codes(encode_array(config, arr), config.n_bits)


def decode_block(config: QuantizerConfig, data: bytes, count: int) -> np.ndarray:
    """Decode ``count`` bit-packed codes back to float32 values."""
    return decode_array(config, unpack_codes(data, config.n_bits, count))
