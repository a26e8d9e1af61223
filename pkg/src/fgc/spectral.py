"""Real-signal DFT, magnitude-based truncation, and a time-domain baseline.

A gradient is treated as a 1D real signal.  Sparsifying it in the
frequency domain (zeroing the weakest Fourier coefficients) keeps the
overall shape and the signs of the reconstructed samples, whereas
zeroing the smallest samples directly leaves hard zeros behind.  Two
selection rules are provided:

* ``count`` drops a fixed fraction theta of the coefficients (the
  smallest by magnitude), so the compression ratio is exactly
  predictable but the relative reconstruction error is data dependent.
* ``energy`` drops the largest set of smallest coefficients whose
  cumulative energy stays within theta**2 of the total, which makes
  ``||v - v_hat|| <= theta * ||v||`` hold by construction (Parseval).

Zeroing coefficients can never increase signal energy, so every
truncation here also satisfies ``||v_hat|| <= ||v||``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Spectrum",
    "SparsificationSpec",
    "AssumptionCheck",
    "dft_forward",
    "dft_inverse",
    "truncate",
    "sparsify_time",
    "assumption_check",
    "half_round_trip",
    "bin_weights",
    "spectrum_energy",
]

# relative slack for float comparisons in the truncation-error audit
AUDIT_SLACK = 1e-12


@dataclass(frozen=True)
class Spectrum:
    """Half spectrum of a length-n real signal: ``n // 2 + 1`` complex bins."""

    coefficients: np.ndarray
    n: int

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coefficients, dtype=np.complex128)
        object.__setattr__(self, "coefficients", coeffs)
        if self.n < 1:
            raise ValueError("signal length must be >= 1")

    @property
    def bins(self) -> int:
        return self.coefficients.shape[0]


@dataclass(frozen=True)
class SparsificationSpec:
    """Dropout ratio theta plus selection mode and operating domain."""

    theta: float
    mode: str = "count"      # "count" | "energy"
    domain: str = "frequency"  # "frequency" | "time"

    def __post_init__(self) -> None:
        if not (0.0 <= self.theta <= 1.0):
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")
        if self.mode not in ("count", "energy"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.domain not in ("frequency", "time"):
            raise ValueError(f"unknown domain {self.domain!r}")


@dataclass(frozen=True)
class AssumptionCheck:
    """Result of auditing a sparsified vector against its original."""

    error_ratio: float
    norm_nonexpansive: bool
    holds: bool


def dft_forward(signal) -> Spectrum:
    """Forward DFT of a real signal (unnormalized, half-spectrum)."""
    v = np.asarray(signal, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("signal must be a non-empty 1D sequence")
    if not np.isfinite(v).all():
        raise ValueError("signal must be finite")
    return Spectrum(np.fft.rfft(v), v.size)


def dft_inverse(spectrum: Spectrum) -> np.ndarray:
    """Inverse DFT back to a real signal; applies the 1/n scaling."""
    expected = spectrum.n // 2 + 1
    if spectrum.bins != expected:
        raise ValueError(
            f"half spectrum of a length-{spectrum.n} signal needs {expected} bins, "
            f"got {spectrum.bins}"
        )
    return np.fft.irfft(spectrum.coefficients, n=spectrum.n)


def bin_weights(n: int) -> np.ndarray:
    """Parseval weights of the half spectrum: interior bins count twice."""
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def spectrum_energy(spectrum: Spectrum) -> float:
    """Signal energy ||v||**2 computed from the half spectrum."""
    w = bin_weights(spectrum.n)
    return float(np.sum(w * np.abs(spectrum.coefficients) ** 2) / spectrum.n)


def _drop_set(magnitudes: np.ndarray, energies: np.ndarray, spec: SparsificationSpec) -> np.ndarray:
    """Indices to zero under the given rule, smallest magnitudes first.

    Ties break toward the lower index (stable ascending sort), which keeps
    the selection deterministic.
    """
    order = np.argsort(magnitudes, kind="stable")
    if spec.mode == "count":
        k = int(np.ceil(spec.theta * magnitudes.size))
        return order[:k]
    if spec.theta == 0.0:
        return order[:0]
    budget = spec.theta**2 * float(energies.sum())
    cumulative = np.cumsum(energies[order])
    k = int(np.searchsorted(cumulative, budget, side="right"))
    return order[:k]


def truncate(spectrum: Spectrum, spec: SparsificationSpec) -> tuple[Spectrum, np.ndarray]:
    """Zero the weakest frequency bins; returns (spectrum, kept mask)."""
    if spec.domain != "frequency":
        raise ValueError(f"truncate expects a frequency-domain spec, got {spec.domain!r}")
    coeffs = spectrum.coefficients
    magnitudes = np.abs(coeffs)
    # energy per bin uses the Parseval weights so the energy rule bounds
    # the time-domain error exactly
    energies = bin_weights(spectrum.n) * magnitudes**2
    dropped = _drop_set(magnitudes, energies, spec)
    mask = np.ones(spectrum.bins, dtype=bool)
    mask[dropped] = False
    out = coeffs.copy()
    out[dropped] = 0.0
    return Spectrum(out, spectrum.n), mask


def sparsify_time(signal, spec: SparsificationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Zero the smallest-|x| samples directly; returns (signal, kept mask)."""
    if spec.domain != "time":
        raise ValueError(f"sparsify_time expects a time-domain spec, got {spec.domain!r}")
    v = np.asarray(signal, dtype=np.float64)
    magnitudes = np.abs(v)
    dropped = _drop_set(magnitudes, magnitudes**2, spec)
    mask = np.ones(v.size, dtype=bool)
    mask[dropped] = False
    out = v.copy()
    out[dropped] = 0.0
    return out, mask


def assumption_check(v, v_hat, theta: float) -> AssumptionCheck:
    """Audit ||v - v_hat|| <= theta * ||v|| and ||v_hat|| <= ||v||."""
    a = np.asarray(v, dtype=np.float64)
    b = np.asarray(v_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    norm = float(np.linalg.norm(a))
    error_ratio = 0.0 if norm == 0.0 else float(np.linalg.norm(a - b)) / norm
    nonexpansive = float(np.linalg.norm(b)) <= norm * (1.0 + AUDIT_SLACK)
    return AssumptionCheck(
        error_ratio=error_ratio,
        norm_nonexpansive=nonexpansive,
        holds=error_ratio <= theta + AUDIT_SLACK,
    )


def half_round_trip(signal) -> np.ndarray:
    """Round through IEEE binary16 (round-to-nearest-even) and back.

    Values beyond the binary16 range become inf; callers that cannot
    tolerate that must check the result.
    """
    with np.errstate(over="ignore"):
        return np.asarray(signal, dtype=np.float64).astype(np.float16).astype(np.float64)
