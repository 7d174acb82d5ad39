"""LPC (autocorrelation method) and formant estimation from predictor roots."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import lfilter


class UnstableLpcError(ValueError):
    pass


def autocorrelation(x, order: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    return np.array([np.dot(x[:n - k], x[k:]) for k in range(order + 1)])


def levinson_durbin(r, order: int) -> tuple[np.ndarray, float, np.ndarray]:
    """Solve the normal equations for ``A(z) = 1 + a1 z^-1 + ... + ap z^-p``.

    Returns ``(a, prediction_error, reflection_coefficients)`` with
    ``a[0] == 1``. Raises :class:`UnstableLpcError` if the autocorrelation is
    not positive definite.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.size < order + 1:
        raise ValueError("need order + 1 autocorrelation lags")
    if not r[0] > 0:
        raise UnstableLpcError("zero-energy frame")
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    ks = np.zeros(order)
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1:0:-1])
        k = -acc / err
        if not abs(k) < 1.0:
            raise UnstableLpcError(f"reflection coefficient {k} at order {i}")
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        ks[i - 1] = k
        err *= 1.0 - k * k
        if not err > 0:
            raise UnstableLpcError(f"non-positive prediction error at order {i}")
    return a, float(err), ks


def preemphasize(x, coef: float = 0.97) -> np.ndarray:
    """``y[n] = x[n] - coef * x[n-1]`` with the sample before the first taken equal to ``x[0]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    return lfilter([1.0, -coef], [1.0], x, zi=np.array([-coef * x[0]]))[0]


def lpc(frame, order: int = 12) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    x = x * np.hamming(x.size)
    return levinson_durbin(autocorrelation(x, order), order)[0]


def estimate_formants(frame, fs: int = 16000, order: int = 12, preemph: float | None = 0.97,
                      fmin: float = 90.0, fmax: float = 5500.0, max_bw: float = 600.0) -> np.ndarray:
    """Three ``(freq_hz, bw_hz)`` rows, lowest frequency first; NaN rows are missing formants.

    Pass ``preemph=None`` if the frame is already pre-emphasized.
    """
    out = np.full((3, 2), np.nan)
    x = np.asarray(frame, dtype=np.float64)
    if preemph is not None:
        x = preemphasize(x, preemph)
    try:
        a = lpc(x, order)
    except UnstableLpcError:
        return out
    roots = np.roots(a)
    roots = roots[np.imag(roots) > 0]
    mags = np.abs(roots)
    ok = mags > 0
    roots, mags = roots[ok], mags[ok]
    freqs = np.angle(roots) * fs / (2.0 * math.pi)
    bws = -(fs / math.pi) * np.log(mags)
    keep = (freqs >= fmin) & (freqs <= fmax) & (bws > 0) & (bws < max_bw)
    cand = sorted(zip(freqs[keep], bws[keep]))[:3]
    for i, (f, b) in enumerate(cand):
        out[i] = (f, b)
    return out
