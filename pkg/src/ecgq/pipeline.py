"""Per-record preparation: leads -> denoise -> SQI -> QRS -> beats."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import EcgRecord, select_leads
from .labels import ClassLabel
from .preprocess import BANDPASS, NOTCH, FilterSpec, denoise, resample, standardize
from .qrs import BeatWindow, NoBeats, RPeakList, detect_qrs, segment_beats
from .quality import SqiReport, compute_sqi

TARGET_FS = 500


@dataclass
class PreparedRecord:
    patient_id: str
    label: ClassLabel
    fs: float
    peaks: RPeakList
    beats: list[BeatWindow]
    sqi_raw: SqiReport
    sqi_denoised: SqiReport


def prepare_record(
    record: EcgRecord,
    label: ClassLabel,
    bandpass: FilterSpec = BANDPASS,
    notch: FilterSpec = NOTCH,
) -> PreparedRecord:
    """Run the preprocessing chain on one record.

    Raises the underlying module errors (``MissingLead``, ``UnsupportedRate``,
    ``ZeroVariance``, ``NoBeats``, ``TooFewPeaks``) when the record has to be
    excluded.
    """
    leads = select_leads(record.signals, record.lead_names)
    leads = np.vstack([resample(lead, record.fs, TARGET_FS) for lead in leads])
    fs = TARGET_FS
    clean = np.vstack([denoise(lead, fs, bandpass, notch) for lead in leads])
    std = np.vstack([standardize(lead) for lead in clean])
    peaks = detect_qrs(clean[0], fs)
    # the raw report uses its own detections so rr_cv reflects raw quality
    try:
        raw_peaks = detect_qrs(leads[0], fs).indices
    except NoBeats:
        raw_peaks = np.array([], dtype=np.int64)
    # scored in mV: standardizing first would hide the DC offset from bas_sqi
    sqi_raw = compute_sqi(leads[0], raw_peaks, fs)
    sqi_clean = compute_sqi(clean[0], peaks.indices, fs)
    beats = segment_beats(peaks, std, label, record.name)
    return PreparedRecord(record.name, ClassLabel(label), fs, peaks, beats, sqi_raw, sqi_clean)
