"""Signal quality indices for a single ECG lead.

Definitions used here:

* ``rr_cv``: std / mean of the RR intervals (needs at least two R peaks).
* ``skewness``, ``excess_kurtosis``: third and fourth standardized moments
  (population convention), the latter minus 3.
* ``p_sqi``: power in 5-15 Hz over power in 5-40 Hz.
* ``bas_sqi``: 1 - power in 0-1 Hz over power in 0-40 Hz.

Band powers come from a rectangular-window periodogram of the whole record
without detrending, so a DC offset counts as baseline power.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import signal as sps
from scipy import stats

from .preprocess import ZeroVariance

MIN_SECONDS = 2.0


class TooShort(ValueError):
    pass


@dataclass
class SqiReport:
    rr_cv: float | None
    skewness: float
    excess_kurtosis: float
    p_sqi: float
    bas_sqi: float

    def to_dict(self) -> dict:
        return asdict(self)


def _spectrum(x: np.ndarray, fs: float):
    return sps.periodogram(x, fs=fs, window="boxcar", detrend=False, scaling="spectrum")


def _band(freqs, power, lo, hi) -> float:
    return float(power[(freqs >= lo) & (freqs <= hi)].sum())


def band_power(x, fs: float, lo: float, hi: float) -> float:
    """Periodogram power of ``x`` between ``lo`` and ``hi`` Hz inclusive."""
    freqs, power = _spectrum(np.asarray(x, dtype=float), fs)
    return _band(freqs, power, lo, hi)


def _ratio(num: float, den: float) -> float:
    return min(max(num / den, 0.0), 1.0) if den > 0 else 0.0


def compute_sqi(x, r_peaks, fs: float) -> SqiReport:
    x = np.asarray(x, dtype=float)
    if len(x) < MIN_SECONDS * fs:
        raise TooShort(f"{len(x) / fs:.2f} s of signal; need {MIN_SECONDS} s")
    if x.std() == 0:
        raise ZeroVariance("flat signal has no quality statistics")

    peaks = np.asarray(r_peaks)
    rr_cv = None
    if len(peaks) >= 2:
        rr = np.diff(peaks) / fs
        rr_cv = float(rr.std() / rr.mean())

    freqs, power = _spectrum(x, fs)
    p_sqi = _ratio(_band(freqs, power, 5, 15), _band(freqs, power, 5, 40))
    bas_sqi = 1.0 - _ratio(_band(freqs, power, 0, 1), _band(freqs, power, 0, 40))

    report = SqiReport(
        rr_cv=rr_cv,
        skewness=float(stats.skew(x, bias=True)),
        excess_kurtosis=float(stats.kurtosis(x, fisher=True, bias=True)),
        p_sqi=p_sqi,
        bas_sqi=bas_sqi,
    )
    if not all(math.isfinite(v) for v in asdict(report).values() if v is not None):
        raise ValueError("quality indices are not finite")
    return report
