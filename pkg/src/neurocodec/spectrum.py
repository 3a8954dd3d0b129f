"""Patch spectra and the amplitude/phase regression targets.

``dft`` is an iterative radix-2 transform for power-of-two lengths with a
Bluestein chirp-z fallback for everything else. ``naive_dft`` is the
O(w^2) reference sum it is tested against. Both operate along the last
axis, so a whole stack of patches is transformed in one call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_EPS = 1e-8


def naive_dft(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    w = x.shape[-1]
    n = np.arange(w)
    # m*n mod w keeps the angle argument small and exact
    phase = (np.outer(n, n) % w) * (-2.0 * np.pi / w)
    return x @ np.exp(1j * phase).T


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    lead = x.shape[:-1]
    out = x[..., _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = out.reshape(*lead, n // m, m)
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        m *= 2
    return out


def _ifft_pow2(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft_pow2(np.conj(x))) / x.shape[-1]


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    k = np.arange(n)
    # k^2 mod 2n avoids precision loss in the chirp for large k
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * chirp
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    conv = _ifft_pow2(_fft_pow2(a) * _fft_pow2(b))
    return conv[..., :n] * chirp


def dft(x) -> np.ndarray:
    """Forward DFT along the last axis; bin m is sum_n x[n] exp(-2j pi m n / w)."""
    x = np.asarray(x, dtype=np.complex128)
    w = x.shape[-1]
    if w == 0:
        raise ValueError("dft of an empty vector")
    if w & (w - 1) == 0:
        return _fft_pow2(x)
    return _bluestein(x)


def idft(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(dft(np.conj(X))) / X.shape[-1]


def n_bins(w: int) -> int:
    return w // 2 + 1


def amp_phase(bins) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and quadrant-correct phase of the non-redundant half spectrum.

    The phase of an exactly-zero bin is 0.
    """
    bins = np.asarray(bins, dtype=np.complex128)
    half = bins[..., : n_bins(bins.shape[-1])]
    amp = np.abs(half)
    phase = np.where(amp == 0.0, 0.0, np.arctan2(half.imag, half.real))
    return amp, phase


def zscore(values: np.ndarray) -> tuple[np.ndarray, bool]:
    mean = values.mean()
    std = values.std()
    degenerate = bool(std < Z_EPS)
    return (values - mean) / max(std, Z_EPS), degenerate


@dataclass
class SpectrumTarget:
    amplitude: np.ndarray  # (N, B)
    phase: np.ndarray  # (N, B)
    degenerate: bool = False


def target_from_patches(patches) -> SpectrumTarget:
    amp, phase = amp_phase(dft(np.asarray(patches, dtype=np.float64)))
    amp_z, deg_a = zscore(amp)
    phase_z, deg_p = zscore(phase)
    return SpectrumTarget(amp_z, phase_z, deg_a or deg_p)


def build_target(grid) -> SpectrumTarget:
    """Per-sample z-scored spectrum target for every patch of ``grid``."""
    if grid.n_patches == 0:
        raise ValueError("empty patch grid")
    return target_from_patches(grid.patches)


def band_power(signal, rate_hz: float, lo: float, hi: float) -> float:
    """Signal power carried by the DFT bins in [lo, hi] Hz (sum of |X|^2 / T^2, both sides)."""
    signal = np.asarray(signal, dtype=np.float64)
    T = signal.shape[-1]
    spec = dft(signal)
    freqs = np.arange(T) * rate_hz / T
    freqs = np.minimum(freqs, rate_hz - freqs)
    sel = (freqs >= lo) & (freqs <= hi)
    return float(np.sum(np.abs(spec[..., sel]) ** 2) / T**2)
