"""Loudness proxy, MFCCs and the spectral / harmonic descriptor group."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.fft import dct

LOG_FLOOR = 1e-10
POWER_FLOOR = 1e-30
HARMONIC_NFFT = 4096

SPECTRAL_NAMES = (
    "alpha_ratio_db",
    "hammarberg_db",
    "slope_0_500",
    "slope_500_1500",
    "f1_rel_energy_db",
    "f2_rel_energy_db",
    "f3_rel_energy_db",
    "h1_h2_db",
    "h1_a3_db",
    "spectral_flux",
)


def loudness_db(frame) -> float:
    """``20 log10(RMS + 1e-10)``: a level proxy, not an auditory loudness model."""
    x = np.asarray(frame, dtype=np.float64)
    return float(20.0 * math.log10(math.sqrt(np.mean(x * x)) + LOG_FLOOR))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(fs: int, n_fft: int = 512, n_mels: int = 26, fmin: float = 20.0,
                   fmax: float = 8000.0) -> np.ndarray:
    """Triangular filters on the ``n_fft // 2 + 1`` rfft bins, shape ``(n_mels, bins)``."""
    fmax = min(fmax, fs / 2.0)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * fs / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def log_mel_energies(frame, fs: int = 16000, n_fft: int = 512, n_mels: int = 26,
                     fmin: float = 20.0, fmax: float = 8000.0) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    x = x * np.hamming(x.size)
    power = np.abs(np.fft.rfft(x, n_fft)) ** 2
    energies = mel_filterbank(fs, n_fft, n_mels, fmin, fmax) @ power
    return np.log(np.maximum(energies, LOG_FLOOR))


def compute_mfcc(frame, fs: int = 16000, n_fft: int = 512, n_mels: int = 26, fmin: float = 20.0,
                 fmax: float = 8000.0, n_ceps: int = 4) -> np.ndarray:
    """Cepstral coefficients 1..n_ceps (c0 excluded) of a Hamming-windowed frame."""
    cep = dct(log_mel_energies(frame, fs, n_fft, n_mels, fmin, fmax), type=2, norm="ortho")
    return cep[1:n_ceps + 1]


def power_spectrum(frame, nfft: int = HARMONIC_NFFT) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    return np.abs(np.fft.rfft(x * np.hamming(x.size), nfft)) ** 2


def _band(freqs, lo, hi):
    return (freqs >= lo) & (freqs < hi)


def _db(p):
    return 10.0 * np.log10(np.maximum(p, POWER_FLOOR))


def _slope(freqs, db, lo, hi) -> float:
    sel = (freqs >= lo) & (freqs <= hi)
    f = freqs[sel]
    y = db[sel]
    fc = f - f.mean()
    return float(np.dot(fc, y - y.mean()) / np.dot(fc, fc))


def harmonic_peak_db(db: np.ndarray, fs: int, nfft: int, freq: float, half_width: float) -> float:
    """Parabolically refined dB peak within ``freq +/- half_width`` Hz."""
    bin_hz = fs / nfft
    lo = max(1, int(math.floor((freq - half_width) / bin_hz)))
    hi = min(db.size - 2, int(math.ceil((freq + half_width) / bin_hz)))
    if hi < lo:
        return math.nan
    k = lo + int(np.argmax(db[lo:hi + 1]))
    y_m, y_0, y_p = db[k - 1], db[k], db[k + 1]
    den = y_m - 2.0 * y_0 + y_p
    if den >= 0.0:
        return float(y_0)
    delta = 0.5 * (y_m - y_p) / den
    return float(y_0 - 0.25 * (y_m - y_p) * delta)


def compute_spectral_group(frame, fs: int = 16000, f0_hz: float = 0.0, formants=None,
                           prev_frame=None, nfft: int = HARMONIC_NFFT) -> np.ndarray:
    """Ten spectral descriptors in ``SPECTRAL_NAMES`` order; undefined entries are NaN.

    ``formants`` is a sequence of three ``(freq_hz, bw_hz)`` pairs (NaN when
    missing). Harmonic entries need ``f0_hz > 0``; spectral flux needs
    ``prev_frame``.
    """
    p = power_spectrum(frame, nfft)
    freqs = np.arange(p.size) * fs / nfft
    db = _db(p)
    out = np.full(len(SPECTRAL_NAMES), np.nan)

    low, high = p[_band(freqs, 50.0, 1000.0)].sum(), p[_band(freqs, 1000.0, 5000.0)].sum()
    out[0] = 10.0 * math.log10(max(low, POWER_FLOOR) / max(high, POWER_FLOOR))
    peak_lo, peak_hi = p[_band(freqs, 0.0, 2000.0)].max(), p[_band(freqs, 2000.0, 5000.0)].max()
    out[1] = 10.0 * math.log10(max(peak_lo, POWER_FLOOR) / max(peak_hi, POWER_FLOOR))
    out[2] = _slope(freqs, db, 0.0, 500.0)
    out[3] = _slope(freqs, db, 500.0, 1500.0)

    if f0_hz and f0_hz > 0:
        hw = max(0.2 * f0_hz, 2.0 * fs / nfft)
        n_harm = int((fs / 2.0 - hw) // f0_hz)

        def harm(k):
            return harmonic_peak_db(db, fs, nfft, k * f0_hz, hw) if 1 <= k <= n_harm else math.nan

        h1 = harm(1)
        out[7] = h1 - harm(2)
        fm = [(math.nan, math.nan)] * 3 if formants is None else list(formants)
        for i in range(3):
            f_i = fm[i][0]
            if np.isfinite(f_i):
                out[4 + i] = harm(max(1, int(round(f_i / f0_hz)))) - h1
        f3, bw3 = fm[2]
        if np.isfinite(f3) and np.isfinite(bw3):
            ks = [k for k in range(1, n_harm + 1) if abs(k * f0_hz - f3) <= bw3 / 2.0]
            if not ks:
                ks = [max(1, int(round(f3 / f0_hz)))]
            out[8] = h1 - max(harm(k) for k in ks)

    if prev_frame is not None:
        out[9] = spectral_flux(prev_frame, frame)
    return out


def spectral_flux(prev_frame, frame, n_fft: int = 512) -> float:
    """Squared difference of sum-normalized magnitude spectra of consecutive frames."""
    mags = []
    for f in (prev_frame, frame):
        x = np.asarray(f, dtype=np.float64)
        m = np.abs(np.fft.rfft(x * np.hamming(x.size), n_fft))
        s = m.sum()
        mags.append(m / s if s > 0 else m)
    return float(np.sum((mags[1] - mags[0]) ** 2))
