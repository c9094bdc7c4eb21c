"""Denoising, resampling and standardization of ECG leads.

All filters run forward-backward (zero phase) on second-order sections with
odd-reflection padding of three times the filter order at each end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

SUPPORTED_RATES = (500, 1000)


class SignalError(ValueError):
    pass


class SignalTooShort(SignalError):
    pass


class InvalidSpec(SignalError):
    pass


class UnsupportedRate(SignalError):
    pass


class ZeroVariance(SignalError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "bandpass"
    order: int = 4
    low_cut: float = 0.1
    high_cut: float = 100.0
    notch_freqs: tuple[float, ...] = field(default=(50.0, 60.0))
    q_factor: float = 30.0

    def validate(self, fs: float) -> None:
        if self.kind == "bandpass":
            if not 0 < self.low_cut < self.high_cut:
                raise InvalidSpec(f"need 0 < low_cut < high_cut, got {self.low_cut}, {self.high_cut}")
            if fs <= 2 * self.high_cut:
                raise InvalidSpec(f"high_cut {self.high_cut} Hz must be below Nyquist of fs={fs}")
            if self.order < 1:
                raise InvalidSpec("filter order must be positive")
        elif self.kind == "notch":
            if not self.notch_freqs:
                raise InvalidSpec("notch needs at least one frequency")
            if any(not 0 < f < fs / 2 for f in self.notch_freqs):
                raise InvalidSpec(f"notch frequencies {self.notch_freqs} must lie in (0, fs/2)")
            if self.q_factor <= 0:
                raise InvalidSpec("q_factor must be positive")
        else:
            raise InvalidSpec(f"unknown filter kind {self.kind!r}")


BANDPASS = FilterSpec()
NOTCH = FilterSpec(kind="notch", order=2)


def _filtfilt(sos: np.ndarray, x: np.ndarray, order: int) -> np.ndarray:
    padlen = min(3 * order, len(x) - 1)
    return sps.sosfiltfilt(sos, x, padtype="odd", padlen=padlen)


def apply_bandpass(x, fs: float, spec: FilterSpec = BANDPASS) -> np.ndarray:
    """Zero-phase Butterworth bandpass (defaults: 4th order, 0.1-100 Hz)."""
    x = np.asarray(x, dtype=float)
    spec.validate(fs)
    if spec.kind != "bandpass":
        raise InvalidSpec("apply_bandpass needs a bandpass spec")
    if len(x) <= 3 * spec.order:
        raise SignalTooShort(f"{len(x)} samples; need more than {3 * spec.order}")
    sos = sps.butter(spec.order, [spec.low_cut, spec.high_cut], btype="bandpass", fs=fs, output="sos")
    return _filtfilt(sos, x, 2 * spec.order)


def apply_notch(x, fs: float, notch_freqs=(50.0, 60.0), q_factor: float = 30.0) -> np.ndarray:
    """Cascade of second-order IIR notches, one per powerline frequency."""
    spec = FilterSpec(kind="notch", order=2, notch_freqs=tuple(notch_freqs), q_factor=q_factor)
    spec.validate(fs)
    y = np.asarray(x, dtype=float)
    if len(y) <= 3 * spec.order:
        raise SignalTooShort(f"{len(y)} samples; need more than {3 * spec.order}")
    for f0 in spec.notch_freqs:
        b, a = sps.iirnotch(f0, q_factor, fs=fs)
        y = _filtfilt(sps.tf2sos(b, a), y, spec.order)
    return y


def denoise(x, fs: float, bandpass: FilterSpec = BANDPASS, notch: FilterSpec = NOTCH) -> np.ndarray:
    y = apply_bandpass(x, fs, bandpass)
    return apply_notch(y, fs, notch.notch_freqs, notch.q_factor)


def resample(x, fs_in: float, fs_out: float = 500) -> np.ndarray:
    """Bring a lead to ``fs_out``; 1000 Hz input is lowpassed and decimated by 2."""
    x = np.asarray(x, dtype=float)
    if fs_in not in SUPPORTED_RATES or fs_out not in SUPPORTED_RATES or fs_out > fs_in:
        raise UnsupportedRate(f"cannot resample {fs_in} Hz -> {fs_out} Hz")
    if fs_in == fs_out:
        return x
    q = int(fs_in // fs_out)
    n_out = (len(x) * int(fs_out) + int(fs_in) // 2) // int(fs_in)
    return sps.decimate(x, q, ftype="fir", zero_phase=True)[:n_out]


def standardize(x) -> np.ndarray:
    """Zero mean, unit population standard deviation."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise ZeroVariance("need at least two samples")
    mean = x.mean()
    std = x.std()
    if not np.isfinite(std) or std <= 1e-12 * max(1.0, abs(mean)):
        raise ZeroVariance("flat signal")
    return (x - mean) / std
