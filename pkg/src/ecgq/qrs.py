"""QRS detection (Hamilton adaptive threshold) and beat segmentation."""

from __future__ import annotations

import csv
import io
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import signal as sps

from .labels import ClassLabel

log = logging.getLogger(__name__)

# Hamilton's published detection constants
THRESHOLD_COEF = 0.3125
BUFFER_LEN = 8
REFRACTORY_S = 0.200
TWAVE_WINDOW_S = 0.360
SEARCHBACK_RR = 1.5
MA_WINDOW_S = 0.080
SNAP_S = 0.040
SLOPE_WINDOW_S = 0.075

MIN_BEAT_S = 0.24
MAX_BEAT_S = 2.0


class NoBeats(ValueError):
    pass


class TooFewPeaks(ValueError):
    pass


@dataclass
class RPeakList:
    indices: np.ndarray
    fs: float

    def __len__(self) -> int:
        return len(self.indices)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        gaps = np.diff(self.indices)
        if len(gaps) and gaps.min() < REFRACTORY_S * self.fs:
            raise ValueError("R peaks closer than the refractory period")


def _energy(x: np.ndarray, fs: float):
    """8-16 Hz bandpass, rectified derivative, 80 ms moving average."""
    sos = sps.butter(2, [8.0, 16.0], btype="bandpass", fs=fs, output="sos")
    padlen = min(12, len(x) - 1)
    bp = sps.sosfiltfilt(sos, x, padtype="odd", padlen=padlen)
    slope = np.abs(np.gradient(bp)) * fs
    w = max(1, int(round(MA_WINDOW_S * fs)))
    ma = np.convolve(slope, np.ones(w) / w, mode="same")
    return slope, ma


class _Thresholds:
    def __init__(self, ma: np.ndarray, fs: float):
        n_init = max(1, min(BUFFER_LEN, int(len(ma) // fs)))
        step = int(fs)
        init = [ma[i * step:(i + 1) * step].max() for i in range(n_init)]
        self.qrs = deque(init, maxlen=BUFFER_LEN)
        self.noise = deque([0.0] * BUFFER_LEN, maxlen=BUFFER_LEN)
        self.rr = deque([fs] * BUFFER_LEN, maxlen=BUFFER_LEN)

    @property
    def detection(self) -> float:
        noise = np.mean(self.noise)
        return noise + THRESHOLD_COEF * (np.mean(self.qrs) - noise)

    @property
    def rr_mean(self) -> float:
        return float(np.mean(self.rr))


def _snap(x: np.ndarray, idx: int, half: int) -> int:
    lo, hi = max(0, idx - half), min(len(x), idx + half + 1)
    return lo + int(np.argmax(np.abs(x[lo:hi])))


def detect_qrs(x, fs: float) -> RPeakList:
    """Locate R peaks in a filtered lead with Hamilton's decision rules.

    Candidates are peaks of the moving-average slope energy separated by at
    least 200 ms.  A candidate is a QRS when it exceeds
    ``noise_mean + 0.3125 (qrs_mean - noise_mean)`` (means over the last 8
    peaks of each kind), unless it falls within 360 ms of the previous beat
    with less than half its slope (T wave).  When 1.5 mean RR intervals pass
    without a beat, the largest noise peak above half the threshold and at
    least 360 ms after the last beat is promoted.  Each detection is moved
    to the largest absolute sample of ``x`` within +-40 ms.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 2 or not np.any(x != x[0]):
        raise NoBeats("flat signal")
    slope, ma = _energy(x, fs)
    refractory = int(np.ceil(REFRACTORY_S * fs))
    twave = TWAVE_WINDOW_S * fs
    sw = int(round(SLOPE_WINDOW_S * fs))

    cands, _ = sps.find_peaks(ma, distance=refractory)
    cands = cands[ma[cands] > 0]
    th = _Thresholds(ma, fs)

    beats: list[int] = []
    beat_slopes: list[float] = []
    noise_peaks: list[int] = []

    def peak_slope(p: int) -> float:
        return float(slope[max(0, p - sw):p + sw + 1].max())

    def accept(p: int) -> None:
        if beats:
            th.rr.append(p - beats[-1])
        beats.append(p)
        beat_slopes.append(peak_slope(p))
        th.qrs.append(ma[p])

    def search_back(now: int) -> None:
        while beats and now - beats[-1] > SEARCHBACK_RR * th.rr_mean:
            pool = [q for q in noise_peaks if beats[-1] + twave <= q < now]
            if not pool:
                return
            best = max(pool, key=lambda q: ma[q])
            if ma[best] <= 0.5 * th.detection:
                return
            noise_peaks.remove(best)
            accept(best)

    for p in cands:
        search_back(p)
        h = ma[p]
        if h > th.detection:
            if beats and p - beats[-1] < refractory:
                continue
            if beats and p - beats[-1] < twave and peak_slope(p) < 0.5 * beat_slopes[-1]:
                th.noise.append(h)
                noise_peaks.append(p)
                continue
            accept(p)
        else:
            th.noise.append(h)
            noise_peaks.append(p)
    search_back(len(x))

    if not beats:
        raise NoBeats("no QRS complex detected")

    half = int(round(SNAP_S * fs))
    snapped: list[int] = []
    for p in sorted(beats):
        r = _snap(x, p, half)
        if snapped and r - snapped[-1] < refractory:
            if abs(x[r]) > abs(x[snapped[-1]]):
                snapped[-1] = r
            continue
        snapped.append(r)
    return RPeakList(np.array(snapped), fs)


# ---------------------------------------------------------------------------
# beats


@dataclass
class BeatWindow:
    patient_id: str
    beat_number: int
    start: int
    end: int
    lead_ii: np.ndarray
    lead_v1: np.ndarray
    label: ClassLabel

    def __post_init__(self):
        self.label = ClassLabel(self.label)
        if not len(self.lead_ii) == len(self.lead_v1) == self.end - self.start:
            raise ValueError("lead arrays must span end - start samples")

    @property
    def width(self) -> int:
        return self.end - self.start


def segment_beats(
    peaks: RPeakList,
    leads: np.ndarray,
    label: ClassLabel,
    patient_id: str,
) -> list[BeatWindow]:
    """Cut ``[R_k, R_k+1)`` windows from the (II, V1) matrix.

    Each window ends at the R peak it is labelled by, so it holds that
    beat's P wave and PR interval.  Windows outside 0.24-2.0 s are dropped.
    """
    idx = np.asarray(peaks.indices)
    if len(idx) < 2:
        raise TooFewPeaks(f"{len(idx)} R peak(s); need at least 2")
    lo, hi = MIN_BEAT_S * peaks.fs, MAX_BEAT_S * peaks.fs
    beats = []
    for start, end in zip(idx[:-1], idx[1:]):
        width = end - start
        if not lo <= width <= hi:
            log.info("%s: dropping %.3f s window at sample %d", patient_id, width / peaks.fs, start)
            continue
        beats.append(
            BeatWindow(
                patient_id=patient_id,
                beat_number=len(beats),
                start=int(start),
                end=int(end),
                lead_ii=np.asarray(leads[0, start:end], dtype=float),
                lead_v1=np.asarray(leads[1, start:end], dtype=float),
                label=label,
            )
        )
    return beats


BEAT_COLUMNS = ("patient_id", "sample_number", "lead_ii", "lead_v1", "qrs_peak_index", "beat_number", "label_int")


def export_beat_table(beats: Iterable[BeatWindow], dest) -> None:
    """Write one CSV row per sample.  ``qrs_peak_index`` is the R peak that
    closes the window (the beat's labelling peak).  ``dest`` is a path or a
    text stream."""
    own = isinstance(dest, (str, Path))
    fh = open(dest, "w", newline="") if own else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BEAT_COLUMNS)
        for b in beats:
            label = int(b.label)
            for i in range(b.width):
                w.writerow(
                    (b.patient_id, b.start + i, repr(float(b.lead_ii[i])), repr(float(b.lead_v1[i])), b.end, b.beat_number, label)
                )
    finally:
        if own:
            fh.close()


def read_beat_table(src) -> list[BeatWindow]:
    own = isinstance(src, (str, Path))
    fh = open(src, newline="") if own else src
    try:
        groups: dict[tuple[str, int], list] = {}
        for row in csv.DictReader(fh):
            groups.setdefault((row["patient_id"], int(row["beat_number"])), []).append(row)
    finally:
        if own:
            fh.close()
    beats = []
    for (pid, num), rows in groups.items():
        samples = [int(r["sample_number"]) for r in rows]
        beats.append(
            BeatWindow(
                patient_id=pid,
                beat_number=num,
                start=samples[0],
                end=int(rows[0]["qrs_peak_index"]),
                lead_ii=np.array([float(r["lead_ii"]) for r in rows]),
                lead_v1=np.array([float(r["lead_v1"]) for r in rows]),
                label=ClassLabel(int(rows[0]["label_int"])),
            )
        )
    return beats


def beat_table_text(beats: Iterable[BeatWindow]) -> str:
    buf = io.StringIO()
    export_beat_table(beats, buf)
    return buf.getvalue()
