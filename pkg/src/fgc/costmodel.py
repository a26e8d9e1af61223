"""When does compressing gradients pay off?

Compressing a message of M bytes costs time on four stages (precision
change + thresholding, transform, packing, top-k selection); shipping it
costs M / T_comm.  Compression at ratio k wins when twice the
compression cost (sender and receiver both run the pipeline) is smaller
than the saved communication time, which rearranges into a minimal
beneficial ratio:

    k > 1 / (1 - 2 * T_comm * (4/T_m + 1/T_f + 1/T_p + 1/T_s))

On fast networks the denominator can go non-positive: no ratio helps.
Throughputs are in GB/s (1 GB = 1e9 bytes).
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, asdict

import numpy as np

__all__ = [
    "ThroughputProfile",
    "compression_cost",
    "min_beneficial_k",
    "is_beneficial",
    "sweep",
    "sweep_to_csv",
    "bench_stages",
]

GB = 1e9

# compress + decompress: the pipeline runs on both ends of the link
ROUND_TRIP_FACTOR = 2.0


@dataclass(frozen=True)
class ThroughputProfile:
    """Stage and network throughputs in GB/s."""

    t_m: float      # precision change + thresholding
    t_f: float      # transform
    t_p: float      # packing
    t_s: float      # top-k selection
    t_comm: float   # communication

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not (np.isfinite(value) and value > 0.0):
                raise ValueError(f"{name} must be positive and finite, got {value}")
            object.__setattr__(self, name, float(value))

    @property
    def stage_seconds_per_gb(self) -> float:
        return 4.0 / self.t_m + 1.0 / self.t_f + 1.0 / self.t_p + 1.0 / self.t_s


def compression_cost(m_bytes: float, profile: ThroughputProfile) -> float:
    """Seconds to run the compression pipeline over an M-byte message."""
    if m_bytes < 0:
        raise ValueError("message size must be >= 0")
    return (m_bytes / GB) * profile.stage_seconds_per_gb


def min_beneficial_k(profile: ThroughputProfile) -> float | None:
    """Smallest compression ratio that wins, or None when none can."""
    denominator = 1.0 - ROUND_TRIP_FACTOR * profile.t_comm * profile.stage_seconds_per_gb
    if denominator <= 0.0:
        return None
    return 1.0 / denominator


def is_beneficial(m_bytes: float, k: float, profile: ThroughputProfile) -> bool:
    """Literal check: 2 * compression cost < saved communication time."""
    if k < 1.0:
        raise ValueError("compression ratio k must be >= 1")
    saved = (m_bytes / GB) / profile.t_comm * (1.0 - 1.0 / k)
    return ROUND_TRIP_FACTOR * compression_cost(m_bytes, profile) < saved


def sweep(profile: ThroughputProfile, t_comm_values) -> list[tuple[float, float]]:
    """(t_comm, min beneficial k) rows; infeasible points carry inf."""
    rows = []
    for t_comm in t_comm_values:
        point = ThroughputProfile(profile.t_m, profile.t_f, profile.t_p, profile.t_s, t_comm)
        k = min_beneficial_k(point)
        rows.append((float(t_comm), float("inf") if k is None else k))
    return rows


def sweep_to_csv(rows: list[tuple[float, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["t_comm_gbps", "min_k"])
    for t_comm, k in rows:
        writer.writerow([repr(t_comm), repr(k)])
    return buffer.getvalue()


def _time_stage(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_stages(
    elements: int = 1_000_000,
    repeats: int = 5,
    t_comm: float = 1.0,
    seed: int = 0,
) -> ThroughputProfile:
    """Measure this machine's stage throughputs on real pipeline kernels.

    Reported numbers describe this implementation on this host; they are
    never asserted against any published figures.
    """
    from . import packer, spectral

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(elements)
    m_bytes = 4.0 * elements

    spectrum = spectral.dft_forward(v)
    magnitudes = np.abs(spectrum.coefficients)
    cutoff = float(np.quantile(magnitudes, 0.7))
    sparse = np.where(np.abs(v) > float(np.quantile(np.abs(v), 0.7)), v, 0.0)

    def stage_precision_threshold():
        w = v.astype(np.float32).astype(np.float64)
        np.where(np.abs(w) > cutoff, w, 0.0)

    def stage_transform():
        np.fft.rfft(v)

    def stage_pack():
        packer.pack(sparse)

    def stage_select():
        np.argpartition(magnitudes, magnitudes.size // 3)

    seconds = {
        "t_m": _time_stage(stage_precision_threshold, repeats),
        "t_f": _time_stage(stage_transform, repeats),
        "t_p": _time_stage(stage_pack, repeats),
        "t_s": _time_stage(stage_select, repeats),
    }
    throughput = {name: (m_bytes / GB) / max(t, 1e-12) for name, t in seconds.items()}
    return ThroughputProfile(t_comm=t_comm, **throughput)
