"""Stream compaction: sparse vector -> occupancy bitmap + dense payload.

The packing algorithm is the scan-and-scatter one: mark non-zero slots
in a status vector, inclusive-prefix-sum the status into a location
vector, then scatter each marked element to ``dense[location - 1]``.
The scan is exposed on its own so it can be checked against a
sequential oracle whatever the internal strategy is.

On the wire the bitmap is packed MSB-first within each byte, byte ``i``
covering elements ``[8i, 8i + 8)``, padded with zero bits to a byte
boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PackedSparse", "pack", "unpack", "prefix_sum", "bitmap_to_bytes", "bitmap_from_bytes"]


@dataclass(frozen=True)
class PackedSparse:
    """Occupancy bitmap plus the non-zero values in original index order."""

    bitmap: np.ndarray   # bool, one flag per original element
    dense: np.ndarray    # kept values, ascending original index
    original_len: int

    def __post_init__(self) -> None:
        bitmap = np.asarray(self.bitmap, dtype=bool)
        object.__setattr__(self, "bitmap", bitmap)
        object.__setattr__(self, "dense", np.asarray(self.dense))
        if bitmap.size != self.original_len:
            raise ValueError(
                f"bitmap covers {bitmap.size} elements, expected {self.original_len}"
            )


def prefix_sum(status) -> np.ndarray:
    """Inclusive prefix sum of a 0/1 status vector."""
    s = np.asarray(status)
    if s.dtype != bool and s.size and bool(((s != 0) & (s != 1)).any()):
        raise ValueError("status entries must be 0 or 1")
    return np.cumsum(s, dtype=np.int64)


def pack(sparse) -> PackedSparse:
    """Compact a sparse vector: non-zeros scatter to their scan position."""
    values = np.asarray(sparse)
    status = (values != 0).astype(np.int64)
    location = prefix_sum(status)
    kept = int(location[-1]) if location.size else 0
    dense = np.empty(kept, dtype=values.dtype)
    marked = status == 1
    dense[location[marked] - 1] = values[marked]
    return PackedSparse(bitmap=marked, dense=dense, original_len=values.size)


def unpack(packed: PackedSparse) -> np.ndarray:
    """Restore the sparse vector; zeros where the bitmap is clear."""
    kept = int(np.count_nonzero(packed.bitmap))
    if kept != packed.dense.size:
        raise ValueError(
            f"bitmap marks {kept} elements but dense payload has {packed.dense.size}"
        )
    out = np.zeros(packed.original_len, dtype=packed.dense.dtype)
    out[packed.bitmap] = packed.dense
    return out


def bitmap_to_bytes(bitmap: np.ndarray) -> bytes:
    """Serialize MSB-first within each byte, zero-padded to a byte boundary."""
    return np.packbits(np.asarray(bitmap, dtype=np.uint8), bitorder="big").tobytes()


def bitmap_from_bytes(data: bytes, length: int) -> np.ndarray:
    """Inverse of :func:`bitmap_to_bytes` for a known element count."""
    need = (length + 7) // 8
    if len(data) < need:
        raise ValueError(f"bitmap buffer too short: {len(data)} < {need} bytes")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    return bits[:length].astype(bool)
