"""Autocorrelation pitch, harmonics-to-noise ratio, and period perturbation measures."""

from __future__ import annotations

import math

import numpy as np

HNR_MIN_DB = -20.0
HNR_MAX_DB = 60.0
# a candidate at a shorter lag wins if it reaches this fraction of the best peak (octave guard)
OCTAVE_RATIO = 0.9


def normalized_autocorrelation(frame, max_lag: int) -> np.ndarray:
    """``r[k] = sum x[n] x[n+k] / sqrt(E_head(k) * E_tail(k))`` for ``k = 0..max_lag``.

    The frame is mean-removed first. Lags with zero energy on either side get 0.
    """
    x = np.asarray(frame, dtype=np.float64)
    x = x - x.mean()
    n = x.size
    max_lag = min(max_lag, n - 1)
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(x, nfft)
    ac = np.fft.irfft(spec * np.conj(spec), nfft)[:max_lag + 1]
    c = np.concatenate(([0.0], np.cumsum(x * x)))
    lags = np.arange(max_lag + 1)
    head = c[n - lags]  # energy of x[0 : n-k]
    tail = c[n] - c[lags]  # energy of x[k : n]
    den = np.sqrt(head * tail)
    thresh = 1e-12 * c[n]
    return np.divide(ac, den, out=np.zeros_like(ac), where=den > max(thresh, 0.0))


def _parabolic(y_m: float, y_0: float, y_p: float) -> tuple[float, float]:
    """Offset and value of the vertex of the parabola through three equally spaced points."""
    den = y_m - 2.0 * y_0 + y_p
    if den >= 0.0:
        return 0.0, y_0
    delta = 0.5 * (y_m - y_p) / den
    return delta, y_0 - 0.25 * (y_m - y_p) * delta


def estimate_f0(frame, fs: int = 16000, fmin: float = 55.0, fmax: float = 1000.0,
                threshold: float = 0.45) -> tuple[float, bool, float]:
    """Return ``(f0_hz, voiced, r_max)``; ``f0_hz`` is 0 when unvoiced.

    Searches local maxima of the normalized autocorrelation over lags
    ``[fs/fmax, fs/fmin]``. The shortest-lag peak within ``OCTAVE_RATIO`` of
    the highest is taken and refined by parabolic interpolation.
    """
    x = np.asarray(frame, dtype=np.float64)
    lag_lo = max(1, int(math.floor(fs / fmax)))
    lag_hi = int(math.ceil(fs / fmin))
    if x.size < lag_lo + 3 or not np.any(x - x.mean()):
        return 0.0, False, 0.0
    r = normalized_autocorrelation(x, lag_hi + 1)
    hi = min(lag_hi, r.size - 2)
    if hi <= lag_lo:
        return 0.0, False, 0.0
    k = np.arange(max(lag_lo, 1), hi + 1)
    peaks = k[(r[k] > r[k - 1]) & (r[k] >= r[k + 1])]
    if peaks.size == 0:
        return 0.0, False, 0.0
    best = r[peaks].max()
    if best <= 0.0:
        return 0.0, False, 0.0
    lag = int(peaks[np.argmax(r[peaks] >= OCTAVE_RATIO * best)])
    delta, value = _parabolic(r[lag - 1], r[lag], r[lag + 1])
    r_max = float(min(value, 1.0))
    f0 = fs / (lag + delta)
    voiced = r_max >= threshold and fmin <= f0 <= fmax
    return (float(f0) if voiced else 0.0), bool(voiced), r_max


def autocorrelation_at(frame, lag: float) -> float:
    """Normalized autocorrelation at a fractional lag (parabolic interpolation)."""
    k = int(round(lag))
    r = normalized_autocorrelation(frame, k + 1)
    if k < 1 or k + 1 >= r.size:
        return float(r[min(max(k, 0), r.size - 1)])
    d = lag - k
    r_m, r_0, r_p = r[k - 1], r[k], r[k + 1]
    return float(r_0 + 0.5 * d * (r_p - r_m) + 0.5 * d * d * (r_p - 2.0 * r_0 + r_m))


def hnr_from_r(r: float) -> float:
    """``10 log10(r / (1 - r))`` clamped to [-20, 60] dB."""
    if r <= 0.0:
        return HNR_MIN_DB
    if r >= 1.0:
        return HNR_MAX_DB
    return float(np.clip(10.0 * math.log10(r / (1.0 - r)), HNR_MIN_DB, HNR_MAX_DB))


def compute_hnr(frame, f0_lag: float | None) -> float:
    """HNR in dB at the pitch lag (in samples); NaN (undefined) for unvoiced frames."""
    if not f0_lag or f0_lag <= 0:
        return math.nan
    return hnr_from_r(autocorrelation_at(frame, f0_lag))


def pick_period_peaks(samples, fs: int, f0_hz: float) -> tuple[np.ndarray, np.ndarray]:
    """Positive waveform peaks, one per period, guided by the expected period.

    Each next peak is the maximum within 0.75..1.25 periods of the previous
    one; picking stops at the first candidate not above the waveform mean.
    Positions and amplitudes are parabolically refined. Returns
    ``(positions_in_samples, amplitudes)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x - x.mean()
    period = fs / f0_hz
    n = x.size
    first_end = min(n - 1, int(math.ceil(period)) + 1)
    if first_end < 2:
        return np.zeros(0), np.zeros(0)
    p = 1 + int(np.argmax(x[1:first_end]))
    # the window may end on the rising edge of a pulse; climb to its top
    while p + 1 < n - 1 and x[p + 1] > x[p]:
        p += 1
    pos, amp = [], []
    while True:
        if p <= 0 or p >= n - 1:
            break
        d, v = _parabolic(x[p - 1], x[p], x[p + 1])
        if v <= 0:
            break
        pos.append(p + d)
        amp.append(v)
        lo = p + int(math.ceil(0.75 * period))
        hi = p + int(math.floor(1.25 * period))
        if hi >= n - 1:
            break
        p = lo + int(np.argmax(x[lo:hi + 1]))
    return np.asarray(pos), np.asarray(amp)


def compute_jitter_shimmer(samples, fs: int, f0_hz: float, min_periods: int = 4) -> tuple[float, float]:
    """Local jitter and shimmer in percent; NaN when fewer than ``min_periods`` periods are found.

    jitter = mean |T_i - T_(i-1)| / mean T, shimmer = mean |A_i - A_(i-1)| / mean A.
    """
    if not f0_hz or f0_hz <= 0:
        return math.nan, math.nan
    pos, amp = pick_period_peaks(samples, fs, f0_hz)
    periods = np.diff(pos)
    if periods.size < min_periods:
        return math.nan, math.nan
    jitter = 100.0 * np.mean(np.abs(np.diff(periods))) / np.mean(periods)
    shimmer = 100.0 * np.mean(np.abs(np.diff(amp))) / np.mean(amp)
    return float(jitter), float(shimmer)
