from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from ecgq.preprocess import (
    BANDPASS,
    FilterSpec,
    InvalidSpec,
    SignalTooShort,
    UnsupportedRate,
    ZeroVariance,
    apply_bandpass,
    apply_notch,
    denoise,
    resample,
    standardize,
)

FS = 500
TRIM = 2 * FS  # transient trim for steady-state measurements


def sine(f, seconds=20, fs=FS, amp=1.0):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * f * t)


def steady_amp(y, f, fs=FS, trim=TRIM):
    """Least-squares amplitude of the ``f`` Hz component, edges trimmed.

    A fit (rather than RMS) ignores most of the slow 0.1 Hz edge transient.
    """
    t = np.arange(len(y))[trim:-trim] / fs
    basis = np.column_stack([np.sin(2 * np.pi * f * t), np.cos(2 * np.pi * f * t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(basis, y[trim:-trim], rcond=None)
    return float(np.hypot(coef[0], coef[1]))


def gain_db(fn, f, seconds=40):
    return 20 * np.log10(steady_amp(fn(sine(f, seconds)), f))


def test_bandpass_zero_in_zero_out():
    assert not apply_bandpass(np.zeros(2000), FS).any()


def test_bandpass_removes_dc():
    y = apply_bandpass(np.ones(30 * FS), FS)
    assert np.abs(y[TRIM:-TRIM]).max() < 0.05


def test_bandpass_passes_10hz():
    # the residual edge transient still leaks ~1e-6 into the fit at 20 s trim
    amp = steady_amp(apply_bandpass(sine(10, seconds=60), FS), 10, trim=20 * FS)
    assert 0.707 <= amp <= 1.0 + 1e-5


@pytest.mark.parametrize("f", [1, 2, 5, 10, 20, 30, 40])
def test_bandpass_passband_flat(f):
    assert abs(gain_db(lambda x: apply_bandpass(x, FS), f)) <= 3


def test_bandpass_stopband_150hz():
    assert gain_db(lambda x: apply_bandpass(x, FS), 150) <= -20


def test_bandpass_stopband_very_low():
    # 0.01 Hz needs a long record to measure; compare frequency response of the
    # forward-backward cascade (|H|^2) instead
    sos = sps.butter(BANDPASS.order, [BANDPASS.low_cut, BANDPASS.high_cut], btype="bandpass", fs=FS, output="sos")
    _, h = sps.sosfreqz(sos, worN=[0.01], fs=FS)
    assert 20 * np.log10(np.abs(h[0]) ** 2) <= -20


def test_bandpass_too_short():
    with pytest.raises(SignalTooShort):
        apply_bandpass(np.ones(5), FS)


@pytest.mark.parametrize(
    "spec",
    [FilterSpec(low_cut=0), FilterSpec(low_cut=50, high_cut=40), FilterSpec(high_cut=260), FilterSpec(kind="comb")],
)
def test_bandpass_invalid_spec(spec):
    with pytest.raises(InvalidSpec):
        apply_bandpass(np.ones(1000), FS, spec)


@pytest.mark.parametrize("f", [50, 60])
def test_notch_kills_powerline(f):
    y = apply_notch(sine(f), FS)
    assert steady_amp(y, f) <= 0.1
    assert gain_db(lambda x: apply_notch(x, FS), f) <= -20


@pytest.mark.parametrize("f", [40, 70])
def test_notch_leaves_neighbours(f):
    assert gain_db(lambda x: apply_notch(x, FS), f) >= -1


def test_notch_passes_10hz():
    assert steady_amp(apply_notch(sine(10), FS), 10) >= 0.9


def test_notch_invalid():
    with pytest.raises(InvalidSpec):
        apply_notch(np.ones(1000), FS, notch_freqs=(300,))
    with pytest.raises(InvalidSpec):
        apply_notch(np.ones(1000), FS, notch_freqs=())


def test_zero_phase_pulse_train():
    x = np.zeros(10 * FS)
    x[FS::FS] = 1.0
    y = denoise(x, FS)
    xc = sps.correlate(y, x, mode="full")
    assert int(np.argmax(xc)) - (len(x) - 1) == 0


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), seed=st.integers(0, 2**31))
def test_filters_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 1500))
    lhs = denoise(a * x + b * y, FS)
    rhs = a * denoise(x, FS) + b * denoise(y, FS)
    scale = max(np.abs(rhs).max(), 1e-12)
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(scale, 1.0)


def test_resample_identity():
    x = np.random.default_rng(0).normal(size=777)
    y = resample(x, 500, 500)
    assert y.tobytes() == x.astype(float).tobytes()


def test_resample_length():
    assert len(resample(np.zeros(2000), 1000, 500)) == 1000
    assert len(resample(np.zeros(2001), 1000, 500)) == 1001


def test_resample_sine_fidelity():
    x = sine(5, seconds=4, fs=1000)
    y = resample(x, 1000, 500)
    target = sine(5, seconds=4, fs=500)
    assert np.corrcoef(y, target)[0, 1] >= 0.999


@pytest.mark.parametrize("fs", [250, 360, 2000])
def test_resample_rejects_rate(fs):
    with pytest.raises(UnsupportedRate):
        resample(np.zeros(100), fs, 500)


def test_standardize_two_points():
    assert standardize([0.0, 2.0]).tolist() == [-1.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0.01, 100), b=st.floats(-100, 100), seed=st.integers(0, 2**31))
def test_standardize_affine_invariant(a, b, seed):
    x = np.random.default_rng(seed).normal(size=200)
    assert np.allclose(standardize(a * x + b), standardize(x), atol=1e-9)


def test_standardize_moments():
    z = standardize(np.random.default_rng(3).normal(5, 3, 10**5))
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9


def test_standardize_flat():
    with pytest.raises(ZeroVariance):
        standardize(np.full(100, 3.3))
