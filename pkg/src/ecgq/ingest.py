"""PhysioNet-challenge style record ingestion.

Records are a WFDB text header (``.hea``) plus a signal payload that is
either a format-16 binary file (``.dat``: interleaved little-endian int16)
or a MATLAB level-4 file (``.mat``) holding one integer matrix, which is how
the 2020/2021 challenge ships its data.  Header comment lines carry the
demographics (``#Age``, ``#Sex``) and SNOMED CT diagnoses (``#Dx``).
"""

from __future__ import annotations

import csv
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .labels import ClassLabel, LabelError, MultiLabel, NoRelevantLabel, map_labels

log = logging.getLogger(__name__)

SUPPORTED_FORMATS = frozenset({16})
REQUIRED_LEADS = ("II", "V1")
MAT4_INT_TYPES = {2: "i4", 3: "i2", 4: "u2", 5: "u1"}


class IngestError(Exception):
    """Base class for ingestion failures."""


class MalformedHeader(IngestError):
    pass


class UnsupportedFormatCode(IngestError):
    pass


class LengthMismatch(IngestError):
    pass


class UnsupportedContainer(IngestError):
    pass


class MissingLead(IngestError):
    pass


class EmptyCohort(IngestError):
    pass


@dataclass
class SignalSpec:
    file_name: str
    format_code: int
    gain: float
    baseline: int
    units: str
    lead_name: str
    byte_offset: int = 0
    adc_res: int = 16
    adc_zero: int = 0
    init_value: int = 0
    checksum: int = 0
    block_size: int = 0


@dataclass
class RecordHeader:
    record_name: str
    n_signals: int
    fs: float
    n_samples: int
    signals: list[SignalSpec]
    base_time: str | None = None
    base_date: str | None = None
    extra_comments: list[str] = field(default_factory=list)

    @property
    def lead_names(self) -> list[str]:
        return [s.lead_name for s in self.signals]


@dataclass
class PatientMeta:
    age: float | None = None
    sex: str | None = None
    dx_codes: list[str] = field(default_factory=list)
    source: str = "unknown"


@dataclass
class EcgRecord:
    """A decoded recording: ``signals`` is (n_leads, n_samples) in mV."""

    name: str
    fs: float
    signals: np.ndarray
    lead_names: list[str]
    meta: PatientMeta = field(default_factory=PatientMeta)


# Record-name prefixes used by the challenge databases.
_SOURCE_PREFIXES = (
    ("HR", "PTB-XL"),
    ("JS", "Chapman-Ningbo"),
    ("SYN", "SYNTH"),
    ("A", "CPSC"),
    ("Q", "CPSC-Extra"),
    ("I", "INCART"),
    ("S", "PTB"),
    ("E", "G12EC"),
)


def source_from_name(record_name: str) -> str:
    for prefix, source in _SOURCE_PREFIXES:
        if record_name.upper().startswith(prefix):
            return source
    return "unknown"


# ---------------------------------------------------------------------------
# header text

_FMT_RE = re.compile(r"^(\d+)(?:x\d+)?(?::\d+)?(?:\+(\d+))?$")
_GAIN_RE = re.compile(r"^([-+]?[\d.]+(?:[eE][-+]?\d+)?)(?:\((-?\d+)\))?(?:/(\S+))?$")


def _num(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise MalformedHeader(f"non-numeric {what}: {text!r}") from None


def _int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise MalformedHeader(f"non-integer {what}: {text!r}") from None


def _parse_signal_line(line: str) -> SignalSpec:
    parts = line.split()
    if len(parts) < 2:
        raise MalformedHeader(f"signal line needs file and format: {line!r}")
    m = _FMT_RE.match(parts[1])
    if not m:
        raise MalformedHeader(f"bad format field {parts[1]!r}")
    fmt = int(m.group(1))
    if fmt not in SUPPORTED_FORMATS:
        raise UnsupportedFormatCode(f"signal format {fmt} (supported: {sorted(SUPPORTED_FORMATS)})")
    offset = int(m.group(2) or 0)

    gain, baseline, units = 200.0, None, "mV"
    if len(parts) > 2:
        g = _GAIN_RE.match(parts[2])
        if not g:
            raise MalformedHeader(f"bad gain field {parts[2]!r}")
        gain = float(g.group(1))
        if g.group(2) is not None:
            baseline = int(g.group(2))
        if g.group(3):
            units = g.group(3)
    if gain == 0:
        raise MalformedHeader("signal gain must be nonzero")

    ints = [_int(p, "signal field") for p in parts[3:8]]
    adc_res, adc_zero, init_value, checksum, block_size = ints + [16, 0, 0, 0, 0][len(ints):]
    lead = " ".join(parts[8:]).strip()
    return SignalSpec(
        file_name=parts[0],
        format_code=fmt,
        gain=gain,
        baseline=adc_zero if baseline is None else baseline,
        units=units,
        lead_name=lead,
        byte_offset=offset,
        adc_res=adc_res,
        adc_zero=adc_zero,
        init_value=init_value,
        checksum=checksum,
        block_size=block_size,
    )


def _parse_age(value: str) -> float | None:
    try:
        age = float(value)
    except ValueError:
        return None
    return None if np.isnan(age) or age < 0 else age


def _parse_sex(value: str) -> str | None:
    v = value.strip().lower()
    if v in ("m", "male"):
        return "M"
    if v in ("f", "female"):
        return "F"
    return None


def parse_header(text: str) -> tuple[RecordHeader, PatientMeta]:
    """Parse header text into the record description and patient metadata."""
    lines = [ln.strip() for ln in text.splitlines()]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    comments = [ln[1:].strip() for ln in lines if ln.startswith("#")]
    if not body:
        raise MalformedHeader("empty header")

    rec = body[0].split()
    if len(rec) < 4:
        raise MalformedHeader(f"record line needs name, nsig, fs, nsamp: {body[0]!r}")
    name = rec[0].split("/")[0]
    n_signals = _int(rec[1], "signal count")
    fs = _num(rec[2].split("/")[0].split("(")[0], "sampling frequency")
    n_samples = _int(rec[3], "sample count")
    if n_signals < 1 or fs <= 0 or n_samples <= 0:
        raise MalformedHeader("signal count, fs and sample count must be positive")

    sig_lines = body[1:]
    if len(sig_lines) != n_signals:
        raise MalformedHeader(f"expected {n_signals} signal lines, found {len(sig_lines)}")
    signals = [_parse_signal_line(ln) for ln in sig_lines]

    meta = PatientMeta(source=source_from_name(name))
    extra = []
    for c in comments:
        key, sep, value = c.partition(":")
        key = key.strip().lower()
        if not sep:
            extra.append(c)
        elif key == "age":
            meta.age = _parse_age(value)
        elif key == "sex":
            meta.sex = _parse_sex(value)
        elif key == "dx":
            meta.dx_codes = [d.strip() for d in value.split(",") if d.strip()]
        else:
            extra.append(c)

    header = RecordHeader(
        record_name=name,
        n_signals=n_signals,
        fs=fs,
        n_samples=n_samples,
        signals=signals,
        base_time=rec[4] if len(rec) > 4 else None,
        base_date=rec[5] if len(rec) > 5 else None,
        extra_comments=extra,
    )
    return header, meta


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def format_header(header: RecordHeader, meta: PatientMeta | None = None) -> str:
    """Serialize back to WFDB header text (inverse of :func:`parse_header`)."""
    first = [header.record_name, str(header.n_signals), _fmt_num(header.fs), str(header.n_samples)]
    if header.base_time:
        first.append(header.base_time)
        if header.base_date:
            first.append(header.base_date)
    lines = [" ".join(first)]
    for s in header.signals:
        fmt = f"{s.format_code}+{s.byte_offset}" if s.byte_offset else str(s.format_code)
        gain = f"{_fmt_num(s.gain)}({s.baseline})/{s.units}"
        fields = [s.file_name, fmt, gain, s.adc_res, s.adc_zero, s.init_value, s.checksum, s.block_size, s.lead_name]
        lines.append(" ".join(str(f) for f in fields))
    if meta is not None:
        lines.append(f"#Age: {'NaN' if meta.age is None else _fmt_num(meta.age)}")
        sex = {"M": "Male", "F": "Female"}.get(meta.sex or "", "Unknown")
        lines.append(f"#Sex: {sex}")
        lines.append(f"#Dx: {','.join(meta.dx_codes)}")
    lines.extend(f"#{c}" for c in header.extra_comments)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# signal payloads


def _read_mat4(payload: bytes) -> np.ndarray:
    if len(payload) < 20:
        raise UnsupportedContainer("MAT file shorter than its header")
    for endian in ("<", ">"):
        mopt, mrows, ncols, imagf, namlen = struct.unpack(endian + "5i", payload[:20])
        if 0 <= mopt < 5000:
            break
    else:
        raise UnsupportedContainer("not a MAT level-4 file")
    m_code, o_code, p_code, t_code = mopt // 1000, mopt // 100 % 10, mopt // 10 % 10, mopt % 10
    if m_code not in (0, 1) or o_code != 0 or t_code != 0 or imagf:
        raise UnsupportedContainer(f"unsupported MAT-4 matrix type {mopt}")
    if p_code not in MAT4_INT_TYPES:
        raise UnsupportedContainer("MAT-4 matrix is not an integer matrix")
    dtype = np.dtype(("<" if m_code == 0 else ">") + MAT4_INT_TYPES[p_code])
    start = 20 + namlen
    count = mrows * ncols
    if len(payload) - start != count * dtype.itemsize:
        raise LengthMismatch(
            f"MAT-4 payload holds {len(payload) - start} bytes, {mrows}x{ncols} matrix needs {count * dtype.itemsize}"
        )
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
    # column-major storage
    return data.reshape(ncols, mrows).T.astype(np.int64)


def _read_fmt16(payload: bytes, n_signals: int, n_samples: int, offset: int) -> np.ndarray:
    need = n_signals * n_samples * 2
    if len(payload) - offset != need:
        raise LengthMismatch(f"format-16 payload holds {len(payload) - offset} bytes, expected {need}")
    data = np.frombuffer(payload, dtype="<i2", count=n_signals * n_samples, offset=offset)
    return data.reshape(n_samples, n_signals).T.astype(np.int64)


def read_adu(header: RecordHeader, payload: bytes) -> np.ndarray:
    """Decode the payload to raw ADC units, shape (n_signals, n_samples)."""
    files = {s.file_name for s in header.signals}
    if len(files) != 1:
        raise UnsupportedContainer("all signals must share one payload file")
    suffix = Path(header.signals[0].file_name).suffix.lower()
    if suffix == ".mat":
        adu = _read_mat4(payload)
    elif suffix in (".dat", ""):
        adu = _read_fmt16(payload, header.n_signals, header.n_samples, header.signals[0].byte_offset)
    else:
        raise UnsupportedContainer(f"unknown signal container {suffix!r}")
    if adu.shape != (header.n_signals, header.n_samples):
        raise LengthMismatch(f"payload matrix {adu.shape} does not match header ({header.n_signals}, {header.n_samples})")
    return adu


def read_signal(header: RecordHeader, payload: bytes) -> np.ndarray:
    """Decode a payload to physical units: ``(adu - baseline) / gain`` per lead."""
    adu = read_adu(header, payload)
    gain = np.array([s.gain for s in header.signals], dtype=float)[:, None]
    baseline = np.array([s.baseline for s in header.signals], dtype=float)[:, None]
    return (adu - baseline) / gain


def digitize(signals_mv: np.ndarray, gain: float = 1000.0, baseline: int = 0) -> np.ndarray:
    adu = np.rint(np.asarray(signals_mv, dtype=float) * gain) + baseline
    return np.clip(adu, -32767, 32767).astype(np.int16)


def encode_mat4(adu: np.ndarray, name: str = "val") -> bytes:
    """Serialize an int16 matrix as a little-endian MAT level-4 file."""
    adu = np.asarray(adu, dtype="<i2")
    if adu.ndim != 2:
        raise ValueError("MAT-4 writer expects a 2-D matrix")
    mrows, ncols = adu.shape
    name_b = name.encode("ascii") + b"\0"
    head = struct.pack("<5i", 30, mrows, ncols, 0, len(name_b))
    return head + name_b + adu.T.tobytes()


def encode_fmt16(adu: np.ndarray) -> bytes:
    return np.asarray(adu, dtype="<i2").T.tobytes()


def write_record(
    directory: str | Path,
    record: EcgRecord,
    container: str = "mat",
    gain: float = 1000.0,
) -> Path:
    """Write ``record`` as header + payload; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    adu = digitize(record.signals, gain)
    if container == "mat":
        payload = encode_mat4(adu)
        file_name, offset = f"{record.name}.mat", len(payload) - adu.size * 2
    elif container == "dat":
        payload = encode_fmt16(adu)
        file_name, offset = f"{record.name}.dat", 0
    else:
        raise UnsupportedContainer(container)
    specs = [
        SignalSpec(
            file_name=file_name,
            format_code=16,
            gain=gain,
            baseline=0,
            units="mV",
            lead_name=lead,
            byte_offset=offset,
            init_value=int(adu[i, 0]),
            checksum=int(adu[i].astype(np.int64).sum()) & 0xFFFF,
        )
        for i, lead in enumerate(record.lead_names)
    ]
    header = RecordHeader(record.name, len(specs), record.fs, adu.shape[1], specs)
    (directory / file_name).write_bytes(payload)
    hea = directory / f"{record.name}.hea"
    hea.write_text(format_header(header, record.meta))
    return hea


def read_header_file(path: str | Path) -> tuple[RecordHeader, PatientMeta]:
    return parse_header(Path(path).read_text())


def read_record(path: str | Path) -> EcgRecord:
    """Load a record from its ``.hea`` path (payload file is resolved beside it)."""
    path = Path(path)
    header, meta = read_header_file(path)
    payload = (path.parent / header.signals[0].file_name).read_bytes()
    return EcgRecord(header.record_name, header.fs, read_signal(header, payload), header.lead_names, meta)


# ---------------------------------------------------------------------------
# leads, cohort


def _norm_lead(name: str) -> str:
    return name.strip().upper()


def select_leads(matrix: np.ndarray, lead_names: Sequence[str]) -> np.ndarray:
    """Return the (II, V1) channels of ``matrix`` in that order."""
    index = {_norm_lead(n): i for i, n in enumerate(lead_names)}
    missing = [lead for lead in REQUIRED_LEADS if lead not in index]
    if missing:
        raise MissingLead(f"missing lead(s) {', '.join(missing)}")
    return np.vstack([matrix[index[lead]] for lead in REQUIRED_LEADS])


@dataclass
class CohortCriteria:
    min_age: float = 18.0
    mono_label: bool = True
    keep_unknown_age: bool = False
    required_leads: tuple[str, ...] = REQUIRED_LEADS
    train_fraction: float = 0.6


@dataclass
class CohortEntry:
    record: str
    meta: PatientMeta
    label: ClassLabel
    split: str = "train"

    @property
    def patient_id(self) -> str:
        return Path(self.record).stem


@dataclass
class Cohort:
    entries: list[CohortEntry]
    rejections: list[tuple[str, str]] = field(default_factory=list)

    @property
    def rejection_counts(self) -> Counter:
        return Counter(reason for _, reason in self.rejections)

    def split(self, name: str) -> list[CohortEntry]:
        return [e for e in self.entries if e.split == name]


def _rejection_reason(header: RecordHeader, meta: PatientMeta, mapping, criteria: CohortCriteria):
    if meta.age is None:
        if not criteria.keep_unknown_age:
            return "unknown_age", None
    elif meta.age < criteria.min_age:
        return "under_min_age", None
    leads = {_norm_lead(n) for n in header.lead_names}
    if any(_norm_lead(lead) not in leads for lead in criteria.required_leads):
        return "missing_lead", None
    try:
        label = map_labels(meta.dx_codes, mapping)
    except MultiLabel:
        if criteria.mono_label:
            return "multi_label", None
        relevant = sorted({mapping[c] for c in meta.dx_codes if c in mapping})
        return None, relevant[0]
    except NoRelevantLabel:
        return "no_relevant_label", None
    return None, label


def stratified_split(entries: list[CohortEntry], train_fraction: float, seed: int) -> None:
    """Assign train/test per class, patient-disjoint, in place."""
    rng = np.random.default_rng(seed)
    by_class: dict[ClassLabel, dict[str, list[CohortEntry]]] = {}
    for e in entries:
        by_class.setdefault(e.label, {}).setdefault(e.patient_id, []).append(e)
    for label in sorted(by_class):
        patients = sorted(by_class[label])
        order = rng.permutation(len(patients))
        n_train = int(round(train_fraction * len(patients)))
        if len(patients) >= 2:
            n_train = min(max(n_train, 1), len(patients) - 1)
        for rank, idx in enumerate(order):
            for e in by_class[label][patients[idx]]:
                e.split = "train" if rank < n_train else "test"
    # a patient could carry records of two classes; keep them on one side
    side: dict[str, str] = {}
    for e in entries:
        e.split = side.setdefault(e.patient_id, e.split)


def build_cohort(
    records: Iterable[tuple[str, RecordHeader, PatientMeta]],
    mapping: dict[str, ClassLabel],
    criteria: CohortCriteria | None = None,
    seed: int = 0,
) -> Cohort:
    """Filter parsed records by the cohort criteria and split them.

    ``records`` yields ``(record_ref, header, meta)``; rejected records are
    listed with a reason code in ``Cohort.rejections``.
    """
    criteria = criteria or CohortCriteria()
    entries, rejections = [], []
    for ref, header, meta in records:
        reason, label = _rejection_reason(header, meta, mapping, criteria)
        if reason:
            log.info("excluding %s: %s", ref, reason)
            rejections.append((ref, reason))
        else:
            entries.append(CohortEntry(ref, meta, ClassLabel(label)))
    if not entries:
        raise EmptyCohort(f"no record passed the cohort criteria ({len(rejections)} rejected)")
    entries.sort(key=lambda e: e.record)
    stratified_split(entries, criteria.train_fraction, seed)
    return Cohort(entries, rejections)


MANIFEST_COLUMNS = ("record_id", "source", "age", "sex", "label_int", "split")


def write_manifest(cohort: Cohort, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in cohort.entries:
            age = "" if e.meta.age is None else _fmt_num(e.meta.age)
            w.writerow([e.record, e.meta.source, age, e.meta.sex or "", int(e.label), e.split])


def read_manifest(path: str | Path) -> Cohort:
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            meta = PatientMeta(
                age=float(row["age"]) if row["age"] else None,
                sex=row["sex"] or None,
                source=row["source"],
            )
            entries.append(CohortEntry(row["record_id"], meta, ClassLabel(int(row["label_int"])), row["split"]))
    return Cohort(entries)


def write_rejections(cohort: Cohort, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id", "reason"))
        w.writerows(cohort.rejections)


__all__ = [
    "ClassLabel",
    "Cohort",
    "CohortCriteria",
    "CohortEntry",
    "EcgRecord",
    "EmptyCohort",
    "IngestError",
    "LabelError",
    "LengthMismatch",
    "MalformedHeader",
    "MissingLead",
    "PatientMeta",
    "RecordHeader",
    "SignalSpec",
    "UnsupportedContainer",
    "UnsupportedFormatCode",
    "build_cohort",
    "format_header",
    "parse_header",
    "read_record",
    "read_signal",
    "select_leads",
    "write_manifest",
    "write_record",
]
