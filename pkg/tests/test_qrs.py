from __future__ import annotations

import csv
import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgq.labels import ClassLabel
from ecgq.preprocess import denoise
from ecgq.qrs import (
    BEAT_COLUMNS,
    NoBeats,
    RPeakList,
    TooFewPeaks,
    beat_table_text,
    detect_qrs,
    export_beat_table,
    read_beat_table,
    segment_beats,
)
from ecgq.synth import default_templates, synth_record

FS = 500


def match(detected, truth, tol):
    """Greedy one-to-one matching within ``tol`` samples -> (tp, fp, fn)."""
    detected, used, tp = list(detected), set(), 0
    for t in truth:
        best = None
        for i, d in enumerate(detected):
            if i not in used and abs(d - t) <= tol and (best is None or abs(d - t) < abs(detected[best] - t)):
                best = i
        if best is not None:
            used.add(best)
            tp += 1
    return tp, len(detected) - tp, len(truth) - tp


def nsr_60bpm(n_beats=10, seed=0, snr=None):
    tpl = replace(default_templates()[ClassLabel.NSR], rr_mean=1.0, rr_jitter=0.0)
    rec, truth = synth_record(tpl, n_beats, noise_snr_db=snr, seed=seed)
    return denoise(rec.signals[0], FS), truth


def test_clean_nsr_60bpm():
    x, truth = nsr_60bpm()
    peaks = detect_qrs(x, FS)
    assert len(peaks) == 10
    assert np.abs(peaks.indices - truth.r_samples).max() <= 5


def test_zeros_no_beats():
    with pytest.raises(NoBeats):
        detect_qrs(np.zeros(5000), FS)


@pytest.mark.parametrize("seed", range(3))
def test_noisy_nsr_10db(seed):
    x, truth = nsr_60bpm(n_beats=60, seed=seed, snr=10)
    tp, fp, fn = match(detect_qrs(x, FS).indices, truth.r_samples, tol=int(0.010 * FS))
    assert tp / (tp + fn) >= 0.95 and tp / (tp + fp) >= 0.95


@pytest.mark.parametrize("label", list(ClassLabel))
def test_all_templates_clean(label):
    rec, truth = synth_record(default_templates()[label], 40, seed=int(label))
    tp, fp, fn = match(detect_qrs(denoise(rec.signals[0], FS), FS).indices, truth.r_samples, tol=5)
    assert fp == 0 and fn == 0


def test_t_wave_not_double_counted():
    # tall T waves close to the QRS must not become beats
    tpl = default_templates()[ClassLabel.NSR]
    waves = dict(tpl.lead_ii)
    waves["T"] = replace(waves["T"], amp=0.8)
    rec, truth = synth_record(replace(tpl, lead_ii=waves), 30, seed=5)
    assert len(detect_qrs(denoise(rec.signals[0], FS), FS)) == len(truth.r_times)


def test_search_back_recovers_small_beat():
    x, truth = nsr_60bpm(n_beats=20, seed=1)
    k = truth.r_samples[12]
    x = x.copy()
    x[k - 40:k + 40] *= 0.3  # one beat at 30 % amplitude
    tp, fp, fn = match(detect_qrs(x, FS).indices, truth.r_samples, tol=5)
    assert fn == 0 and fp == 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(600, 6000))
def test_refractory_on_noise(seed, n):
    x = np.random.default_rng(seed).normal(size=n)
    try:
        peaks = detect_qrs(x, FS)
    except NoBeats:
        return
    assert np.all(np.diff(peaks.indices) >= 0.2 * FS)


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 400))
def test_translation_equivariance(c):
    x, _ = nsr_60bpm(n_beats=15, seed=2)
    base = detect_qrs(x, FS).indices
    shifted = detect_qrs(np.concatenate([np.zeros(c), x]), FS).indices
    assert np.array_equal(shifted, base + c)


def test_rpeaklist_rejects_refractory_violation():
    with pytest.raises(ValueError):
        RPeakList([0, 50], FS)


# ---------------------------------------------------------------------------
# segmentation


def leads_for(n):
    t = np.arange(n, dtype=float)
    return np.vstack([np.sin(t / 17), np.cos(t / 23)])


def test_two_peaks_one_beat():
    beats = segment_beats(RPeakList([100, 500], FS), leads_for(1000), ClassLabel.AF, "p")
    assert len(beats) == 1 and (beats[0].start, beats[0].end) == (100, 500)


def test_equal_spacing():
    idx = np.arange(11) * 400 + 50
    beats = segment_beats(RPeakList(idx, FS), leads_for(5000), ClassLabel.NSR, "p")
    assert len(beats) == 10 and {b.width for b in beats} == {400}
    assert [b.beat_number for b in beats] == list(range(10))


def test_long_gap_dropped_numbering_gapless():
    idx = [0, 400, 800, 800 + 3 * FS, 2700, 3100]
    beats = segment_beats(RPeakList(idx, FS), leads_for(4000), ClassLabel.NSR, "p")
    assert [(b.start, b.end) for b in beats] == [(0, 400), (400, 800), (2300, 2700), (2700, 3100)]
    assert [b.beat_number for b in beats] == [0, 1, 2, 3]


def test_too_few_peaks():
    with pytest.raises(TooFewPeaks):
        segment_beats(RPeakList([10], FS), leads_for(100), ClassLabel.NSR, "p")


@settings(max_examples=50, deadline=None)
@given(gaps=st.lists(st.integers(100, 1200), min_size=1, max_size=30))
def test_segmentation_partition(gaps):
    idx = np.concatenate([[0], np.cumsum(gaps)])
    leads = leads_for(int(idx[-1]) + 1)
    beats = segment_beats(RPeakList(idx, FS), leads, ClassLabel.LAE, "p")
    for a, b in zip(beats, beats[1:]):
        assert a.end <= b.start
    for b in beats:
        assert idx[0] <= b.start and b.end <= idx[-1]
        assert 0.24 * FS <= b.width <= 2.0 * FS
        assert np.array_equal(b.lead_ii, leads[0, b.start:b.end])
    assert len(beats) == sum(0.24 * FS <= g <= 2.0 * FS for g in gaps)


# ---------------------------------------------------------------------------
# beat table


def test_table_rows_and_columns():
    beats = segment_beats(RPeakList([0, 300], FS), leads_for(400), ClassLabel.NSR, "p7")
    rows = list(csv.reader(io.StringIO(beat_table_text(beats))))
    assert tuple(rows[0]) == BEAT_COLUMNS
    assert len(rows) == 301
    assert {r[5] for r in rows[1:]} == {"0"}
    assert {r[6] for r in rows[1:]} == {"0"}
    assert [int(r[1]) for r in rows[1:]] == list(range(300))
    assert {r[4] for r in rows[1:]} == {"300"}


def test_table_roundtrip_bit_exact(tmp_path):
    x, truth = nsr_60bpm(n_beats=8)
    peaks = detect_qrs(x, FS)
    leads = np.vstack([x, -0.37 * x + 1e-17])
    beats = segment_beats(peaks, leads, ClassLabel.AVB1, "SYN00042")
    export_beat_table(beats, tmp_path / "b.csv")
    back = read_beat_table(tmp_path / "b.csv")
    assert len(back) == len(beats)
    for a, b in zip(beats, back):
        assert (a.patient_id, a.beat_number, a.start, a.end, a.label) == (b.patient_id, b.beat_number, b.start, b.end, b.label)
        assert a.lead_ii.tobytes() == b.lead_ii.tobytes()
        assert a.lead_v1.tobytes() == b.lead_v1.tobytes()
