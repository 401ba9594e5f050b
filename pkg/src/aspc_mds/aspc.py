"""Per-chirp leakage mitigation by stationary point concentration.

Each chirp is IQ-corrected, the dominant (leakage) tone is located on a
fine zero-padded frequency grid, and the chirp is mixed with the conjugate
of an NCO locked to that tone. Keeping the real part puts the leakage
phase noise on the cosine's stationary point, where it only survives at
second order.

Every function works on a single chirp of shape ``(N,)`` or on a block of
chirps of shape ``(N, M)``, one chirp per column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .signal_model import RadarConfig

# coarse grid used to seed the fine leakage search
_COARSE_FFT_LEN = 8192
# half-width of the fine search band, in coarse bins
_ZOOM_HALF_WIDTH = 2


class NoLeakageError(ValueError):
    """The chirp holds no energy, so no leakage tone can be located."""


@dataclass
class LeakageEstimate:
    """Leakage bin, frequency (Hz) and phase (rad, in (-pi, pi]).

    Scalars for one chirp, ``(M,)`` arrays for a block.
    """

    bin_index: np.ndarray | int
    frequency_hz: np.ndarray | float
    phase_rad: np.ndarray | float


@dataclass
class SpcChirp:
    data: np.ndarray
    estimate: LeakageEstimate


def fast_time_window(n: int, kind: str = "hann") -> np.ndarray:
    return get_window(kind, n, fftbins=True)


def _wrap_phase(phase):
    # np.angle returns [-pi, pi]; fold -pi onto +pi
    return np.where(phase <= -np.pi, phase + 2 * np.pi, phase)


def correct_iq_imbalance(chirp: np.ndarray, window: str = "hann") -> np.ndarray:
    """Blind moment-based quadrature imbalance correction.

    Assumes the clean signal is circular (equal I/Q power, uncorrelated
    I and Q). Gain ratio and phase skew are read off window-weighted
    second moments and the distortion ``Q' = g (Q cos p + I sin p)`` is
    inverted. The taper keeps the moments of a tone from picking up its
    double-frequency term. All-zero or one-sided input comes back
    unchanged.
    """
    x = np.asarray(chirp)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    w = fast_time_window(x.shape[0], window)
    w = w.reshape((-1,) + (1,) * (x.ndim - 1))
    i, q = x.real, x.imag
    p_ii = np.sum(w * i * i, axis=0)
    p_qq = np.sum(w * q * q, axis=0)
    p_iq = np.sum(w * i * q, axis=0)

    ok = (p_ii > 0) & (p_qq > 0)
    p_ii_s = np.where(ok, p_ii, 1.0)
    p_qq_s = np.where(ok, p_qq, 1.0)
    gain = np.where(ok, np.sqrt(p_qq_s / p_ii_s), 1.0)
    sin_skew = np.where(ok, np.clip(p_iq / np.sqrt(p_ii_s * p_qq_s), -0.999999, 0.999999), 0.0)
    cos_skew = np.sqrt(1.0 - sin_skew**2)

    q_fixed = (q / gain - i * sin_skew) / cos_skew
    out = i + 1j * q_fixed
    return np.where(ok, out, x) if x.ndim > 1 else (out if ok else x.copy())


def _first_max_bin(power: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Per column, the smallest bin index among the maxima of ``power``."""
    peak = power.max(axis=0, keepdims=True)
    masked = np.where(power == peak, bins, np.iinfo(np.int64).max)
    return masked.min(axis=0)


def _zoom_spectrum(xw: np.ndarray, nfft: int):
    """Fine-grid spectrum around each column's coarse peak.

    Returns (bins, values), both ``(2*half+1, M)``: the exact nfft-point
    DFT of ``xw`` evaluated only on the band around the coarse maximum.
    """
    n = xw.shape[0]
    ratio = nfft // _COARSE_FFT_LEN
    # FFT along contiguous rows: one chirp per row
    coarse = np.abs(np.fft.fft(np.ascontiguousarray(xw.T), n=_COARSE_FFT_LEN, axis=1)) ** 2
    k0 = np.argmax(coarse, axis=1) * ratio
    half = _ZOOM_HALF_WIDTH * ratio
    offsets = np.arange(-half, half + 1)
    idx = np.arange(n)
    demod = xw * np.exp(-2j * np.pi * np.outer(idx, k0) / nfft)
    kernel = np.exp(-2j * np.pi * np.outer(offsets, idx) / nfft)
    values = kernel @ demod
    bins = np.mod(k0[None, :] + offsets[:, None], nfft)
    return bins, values


def _leakage_spectrum(chirp, nfft: int, window: str, exhaustive: bool):
    x = np.asarray(chirp, dtype=complex)
    if x.shape[0] > nfft:
        raise ValueError("chirp longer than nfft")
    block = x.reshape(x.shape[0], -1)
    if not np.all(np.any(block != 0, axis=0)):
        raise NoLeakageError("all-zero chirp: no leakage tone to find")
    w = fast_time_window(block.shape[0], window)[:, None]
    xw = block * w
    use_zoom = (not exhaustive and nfft > _COARSE_FFT_LEN and nfft % _COARSE_FFT_LEN == 0
                and block.shape[0] <= _COARSE_FFT_LEN)
    if use_zoom:
        bins, values = _zoom_spectrum(xw, nfft)
        best = _first_max_bin(np.abs(values) ** 2, bins)
        col = np.arange(block.shape[1])
        # row of the winning bin inside the band
        row = np.argmax(bins == best[None, :], axis=0)
        return best, values[row, col], x.ndim
    out_bins, out_vals = [], []
    all_bins = np.arange(nfft)[:, None]
    for m in range(block.shape[1]):
        spec = np.fft.fft(xw[:, m], n=nfft)
        k = int(_first_max_bin(np.abs(spec[:, None]) ** 2, all_bins)[0])
        out_bins.append(k)
        out_vals.append(spec[k])
    return np.array(out_bins), np.array(out_vals), x.ndim


def find_leakage_bin(chirp: np.ndarray, nfft: int, window: str = "hann", exhaustive: bool = False):
    """Index of the strongest bin of the nfft-point zero-padded spectrum.

    Ties go to the smaller index. By default the search runs a coarse FFT
    and then evaluates the exact nfft-point DFT only on a narrow band
    around the coarse peak, which returns the full-search argmax whenever
    the leakage is the dominant return. ``exhaustive=True`` computes the
    whole nfft-point spectrum.
    """
    bins, _, ndim = _leakage_spectrum(chirp, nfft, window, exhaustive)
    return int(bins[0]) if ndim == 1 else bins


def estimate_leakage(chirp: np.ndarray, config: RadarConfig, exhaustive: bool = False) -> LeakageEstimate:
    """Leakage frequency and n = 0 phase from the strongest spectral bin."""
    nfft = config.nfft_leakage
    bins, values, ndim = _leakage_spectrum(chirp, nfft, config.fast_time_window, exhaustive)
    signed = np.where(bins < nfft // 2, bins, bins - nfft)
    freq = signed * config.sample_rate_hz / nfft
    phase = _wrap_phase(np.angle(values))
    if ndim == 1:
        return LeakageEstimate(int(bins[0]), float(freq[0]), float(phase[0]))
    return LeakageEstimate(bins, freq, phase)


def nco(estimate: LeakageEstimate, config: RadarConfig, n_samples: int | None = None) -> np.ndarray:
    """``exp(j(2 pi f n / F_s + theta))``, shape ``(N,)`` or ``(N, M)``."""
    n_samples = n_samples or config.samples_per_chirp
    n = np.arange(n_samples)
    freq = np.asarray(estimate.frequency_hz, dtype=float)
    phase = np.asarray(estimate.phase_rad, dtype=float)
    arg = 2 * np.pi * np.multiply.outer(n, freq) / config.sample_rate_hz + phase
    return np.exp(1j * arg)


def apply_spc(chirp: np.ndarray, estimate: LeakageEstimate, config: RadarConfig) -> SpcChirp:
    """Mix with the conjugate NCO and keep the real part."""
    x = np.asarray(chirp)
    if x.shape[0] != config.samples_per_chirp:
        raise ValueError(f"chirp length {x.shape[0]} != samples_per_chirp {config.samples_per_chirp}")
    z = (x * np.conj(nco(estimate, config, x.shape[0]))).real
    return SpcChirp(z, estimate)


def process_chirp(raw_chirp: np.ndarray, config: RadarConfig) -> SpcChirp:
    """IQ correction, leakage estimation and SPC mixing for one chirp or a block."""
    x = correct_iq_imbalance(raw_chirp, config.fast_time_window)
    est = estimate_leakage(x, config)
    return apply_spc(x, est, config)
