"""Objective room-acoustic metrics: EDC, T30, EDT, and echo density.

All metrics operate on a pressure impulse response.  ``preprocess`` applies
the 20 Hz second-order high-pass that precedes every evaluation; band metrics
run on a zero-phase octave filterbank (6th-order Butterworth band-passes,
forward-backward).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import signal

from . import BAND_CENTERS_HZ

# Fraction of samples outside one standard deviation for a Gaussian process.
ERFC_NORM = math.erfc(1.0 / math.sqrt(2.0))


class MetricsError(ValueError):
    pass


def preprocess(h: np.ndarray, fs: int) -> np.ndarray:
    """20 Hz high-pass (2nd order, zero phase) applied before any metric."""
    sos = signal.butter(2, 20.0, btype="highpass", fs=fs, output="sos")
    return signal.sosfiltfilt(sos, np.asarray(h, dtype=float))


def octave_filterbank(h: np.ndarray, fs: int, centers=BAND_CENTERS_HZ) -> np.ndarray:
    """(n_bands, n) array of zero-phase octave-band filtered copies of h."""
    h = np.asarray(h, dtype=float)
    nyq = fs / 2.0
    out = np.empty((len(centers), len(h)))
    for b, fc in enumerate(centers):
        lo = fc / math.sqrt(2.0)
        hi = min(fc * math.sqrt(2.0), 0.995 * nyq)
        if lo >= hi:
            out[b] = np.nan
            continue
        sos = signal.butter(3, [lo, hi], btype="bandpass", fs=fs, output="sos")
        out[b] = signal.sosfiltfilt(sos, h)
    return out


def edc(h: np.ndarray) -> np.ndarray:
    """Normalized energy decay curve (reverse cumulative energy)."""
    e = np.asarray(h, dtype=float) ** 2
    total = e.sum()
    if total <= 0.0:
        raise MetricsError("edc: signal has no energy")
    return np.cumsum(e[::-1])[::-1] / total


def edc_db(h: np.ndarray) -> np.ndarray:
    curve = edc(h)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(curve)


def _first_crossing(curve_db: np.ndarray, level_db: float) -> int:
    idx = np.flatnonzero(curve_db <= level_db)
    if len(idx) == 0:
        raise MetricsError(f"decay never reaches {level_db} dB")
    return int(idx[0])


def t30(h: np.ndarray, fs: int) -> float:
    """Reverberation time from the -5..-35 dB slope of the EDC, seconds."""
    curve = edc_db(h)
    i5 = _first_crossing(curve, -5.0)
    i35 = _first_crossing(curve, -35.0)
    if i35 <= i5 + 1:
        raise MetricsError("t30: decay range too short for regression")
    seg = curve[i5 : i35 + 1]
    t = np.arange(i5, i35 + 1) / fs
    slope = np.polyfit(t, seg, 1)[0]
    if slope >= 0.0:
        raise MetricsError("t30: non-decaying EDC")
    return -60.0 / slope


def edt(h: np.ndarray, fs: int) -> float:
    """Early decay time: the literal -10 dB crossing of the EDC, milliseconds.

    Interpolates linearly between the bracketing samples.
    """
    curve = edc_db(h)
    i = _first_crossing(curve, -10.0)
    if i == 0:
        return 0.0
    c0, c1 = curve[i - 1], curve[i]
    frac = (c0 - (-10.0)) / (c0 - c1) if c1 < c0 else 1.0
    return (i - 1 + frac) / fs * 1000.0


def ned(h: np.ndarray, fs: int, window_ms: float = 25.0, hop_ms: float = 1.0):
    """Normalized echo density trace.

    Sliding rectangular window; per window the fraction of samples deviating
    from the window mean by more than one standard deviation, normalized by
    the Gaussian expectation erfc(1/sqrt(2)).  Returns (times_s, values),
    times at window centers.
    """
    h = np.asarray(h, dtype=float)
    w = int(round(window_ms * 1e-3 * fs))
    hop = max(1, int(round(hop_ms * 1e-3 * fs)))
    if len(h) < w or w < 2:
        return np.empty(0), np.empty(0)
    starts = np.arange(0, len(h) - w + 1, hop)
    windows = np.lib.stride_tricks.sliding_window_view(h, w)[starts]
    mean = windows.mean(axis=1, keepdims=True)
    std = windows.std(axis=1)
    dev = np.abs(windows - mean)
    frac = np.count_nonzero(dev > std[:, None], axis=1) / w
    times = (starts + (w - 1) / 2.0) / fs
    return times, frac / ERFC_NORM


def ned_at(times: np.ndarray, values: np.ndarray, t: float) -> float:
    """Sample an NED trace at time t (nearest window)."""
    if len(times) == 0:
        raise MetricsError("empty NED trace")
    return float(values[int(np.argmin(np.abs(times - t)))])


def analyze_rir(h: np.ndarray, fs: int, bands: bool = True) -> dict:
    """Bundle of metrics for one impulse response.

    Broadband T30/EDT plus, when ``bands`` is set, per-octave-band T30/EDT.
    Metric failures (shallow decay in a band) are reported as NaN.
    """
    hp = preprocess(h, fs)
    out = {"broadband": {}, "bands": {}}
    for name, fn in (("t30_s", t30), ("edt_ms", edt)):
        try:
            out["broadband"][name] = fn(hp, fs)
        except MetricsError:
            out["broadband"][name] = math.nan
    times, vals = ned(hp, fs)
    out["ned_times_s"] = times
    out["ned"] = vals
    if bands:
        filtered = octave_filterbank(hp, fs)
        for b, fc in enumerate(BAND_CENTERS_HZ):
            entry = {}
            for name, fn in (("t30_s", t30), ("edt_ms", edt)):
                try:
                    entry[name] = fn(filtered[b], fs)
                except MetricsError:
                    entry[name] = math.nan
            out["bands"][int(fc)] = entry
    return out
