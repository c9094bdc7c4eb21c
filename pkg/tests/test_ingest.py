from __future__ import annotations

import itertools
import struct

import numpy as np
import pytest
import scipy.io
import wfdb
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgq.ingest import (
    CohortCriteria,
    EcgRecord,
    EmptyCohort,
    LengthMismatch,
    MalformedHeader,
    MissingLead,
    PatientMeta,
    UnsupportedContainer,
    UnsupportedFormatCode,
    build_cohort,
    encode_fmt16,
    encode_mat4,
    format_header,
    parse_header,
    read_adu,
    read_manifest,
    read_record,
    read_signal,
    select_leads,
    write_manifest,
    write_record,
)
from ecgq.labels import ClassLabel, MultiLabel, NoRelevantLabel, load_label_map, map_labels

LEADS12 = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"]

HEADER = """A0001 12 500 7500 05-Feb-2020 11:39:16
A0001.mat 16+24 1000/mV 16 0 28 -1716 0 I
A0001.mat 16+24 1000/mV 16 0 7 2029 0 II
A0001.mat 16+24 1000/mV 16 0 -21 3745 0 III
A0001.mat 16+24 1000/mV 16 0 -17 3680 0 aVR
A0001.mat 16+24 1000/mV 16 0 24 -2664 0 aVL
A0001.mat 16+24 1000/mV 16 0 -7 -1499 0 aVF
A0001.mat 16+24 1000/mV 16 0 -290 390 0 V1
A0001.mat 16+24 1000/mV 16 0 -204 157 0 V2
A0001.mat 16+24 1000/mV 16 0 -96 -2555 0 V3
A0001.mat 16+24 1000/mV 16 0 -112 49 0 V4
A0001.mat 16+24 1000/mV 16 0 -596 -321 0 V5
A0001.mat 16+24 1000/mV 16 0 -16 -3112 0 V6
#Age: 74
#Sex: Male
#Dx: 164889003,270492004
#Rx: Unknown
#Hx: Unknown
#Sx: Unknown
"""


def _record(name="T0001", n=1000, fs=500, leads=("II", "V1"), seed=0, meta=None):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    sig = np.vstack([np.sin(2 * np.pi * (3 + i) * t) * (1 + 0.1 * i) + 0.01 * rng.normal(size=n) for i in range(len(leads))])
    return EcgRecord(name, float(fs), sig, list(leads), meta or PatientMeta(age=50, sex="F", dx_codes=["426783006"]))


# ---------------------------------------------------------------------------
# header


def test_parse_header_record_line():
    header, meta = parse_header(HEADER)
    assert (header.record_name, header.n_signals, header.fs, header.n_samples) == ("A0001", 12, 500, 7500)
    assert header.lead_names == LEADS12
    assert header.signals[0].format_code == 16 and header.signals[0].byte_offset == 24
    assert header.signals[0].gain == 1000 and header.signals[0].baseline == 0


def test_parse_header_comments():
    _, meta = parse_header(HEADER)
    assert meta.age == 74 and meta.sex == "M"
    assert meta.dx_codes == ["164889003", "270492004"]
    assert meta.source == "CPSC"


def test_missing_age_is_unknown():
    _, meta = parse_header(HEADER.replace("#Age: 74\n", ""))
    assert meta.age is None
    _, meta = parse_header(HEADER.replace("#Age: 74", "#Age: NaN"))
    assert meta.age is None


def test_header_matches_reference_reader(tmp_path):
    (tmp_path / "A0001.hea").write_text(HEADER)
    ref = wfdb.rdheader(str(tmp_path / "A0001"))
    header, meta = parse_header(HEADER)
    assert header.fs == ref.fs and header.n_samples == ref.sig_len and header.n_signals == ref.n_sig
    assert header.lead_names == ref.sig_name
    assert [s.gain for s in header.signals] == ref.adc_gain
    assert [s.baseline for s in header.signals] == ref.baseline
    assert [s.init_value for s in header.signals] == ref.init_value
    assert [s.checksum for s in header.signals] == ref.checksum
    dx = next(c for c in ref.comments if c.startswith("Dx"))
    assert meta.dx_codes == dx.split(":")[1].strip().split(",")


@pytest.mark.parametrize(
    "text",
    ["", "A0001 12 500", "A0001 1 abc 100\nA.dat 16 200 16 0 0 0 0 II", "A0001 2 500 100\nA.dat 16 200 16 0 0 0 0 II"],
)
def test_malformed_header(text):
    with pytest.raises(MalformedHeader):
        parse_header(text)


def test_zero_gain_rejected():
    with pytest.raises(MalformedHeader):
        parse_header("R 1 500 10\nR.dat 16 0/mV 16 0 0 0 0 II")


def test_unsupported_format_code():
    with pytest.raises(UnsupportedFormatCode):
        parse_header("R 1 500 10\nR.dat 212 200/mV 12 0 0 0 0 II")


def test_header_roundtrip_numeric_fields():
    header, meta = parse_header(HEADER)
    again, meta2 = parse_header(format_header(header, meta))
    assert again == header
    assert (meta2.age, meta2.sex, meta2.dx_codes) == (meta.age, meta.sex, meta.dx_codes)


@settings(max_examples=50, deadline=None)
@given(
    fs=st.sampled_from([250, 360, 500, 1000, 257.5]),
    n=st.integers(1, 10**7),
    gain=st.one_of(st.integers(1, 10**5), st.floats(0.5, 1e5, allow_nan=False)),
    baseline=st.integers(-32768, 32767),
    nsig=st.integers(1, 4),
)
def test_header_roundtrip_property(fs, n, gain, baseline, nsig):
    sigs = "\n".join(f"R.dat 16 {gain!r}({baseline})/mV 16 0 0 0 0 L{i}" for i in range(nsig))
    header, meta = parse_header(f"R {nsig} {fs} {n}\n{sigs}")
    again, _ = parse_header(format_header(header, meta))
    assert again == header


# ---------------------------------------------------------------------------
# payloads


def test_gain_conversion():
    header, _ = parse_header("R 1 500 2\nR.dat 16 1000(0)/mV 16 0 0 0 0 II")
    assert read_signal(header, encode_fmt16(np.array([[1000, -500]]))).tolist() == [[1.0, -0.5]]


def test_baseline_subtracted():
    header, _ = parse_header("R 1 500 2\nR.dat 16 200(100)/mV 16 0 0 0 0 II")
    assert read_signal(header, encode_fmt16(np.array([[300, 100]]))).tolist() == [[1.0, 0.0]]


def test_all_zero_payload():
    header, _ = parse_header("R 2 500 50\nR.dat 16 1000/mV 16 0 0 0 0 II\nR.dat 16 1000/mV 16 0 0 0 0 V1")
    out = read_signal(header, bytes(2 * 2 * 50))
    assert out.shape == (2, 50) and not out.any()


def test_fmt16_is_interleaved():
    header, _ = parse_header("R 2 500 3\nR.dat 16 1/mV 16 0 0 0 0 II\nR.dat 16 1/mV 16 0 0 0 0 V1")
    payload = struct.pack("<6h", 1, -1, 2, -2, 3, -3)
    assert read_adu(header, payload).tolist() == [[1, 2, 3], [-1, -2, -3]]


def test_length_mismatch():
    header, _ = parse_header("R 2 500 3\nR.dat 16 1/mV 16 0 0 0 0 II\nR.dat 16 1/mV 16 0 0 0 0 V1")
    with pytest.raises(LengthMismatch):
        read_adu(header, bytes(10))


def test_unknown_container():
    header, _ = parse_header("R 1 500 3\nR.edf 16 1/mV 16 0 0 0 0 II")
    with pytest.raises(UnsupportedContainer):
        read_adu(header, bytes(6))


def test_mat4_matches_scipy(tmp_path):
    adu = np.arange(-600, 600, dtype=np.int16).reshape(3, 400)
    path = tmp_path / "x.mat"
    path.write_bytes(encode_mat4(adu))
    assert np.array_equal(scipy.io.loadmat(path)["val"], adu)


def test_reads_scipy_written_mat4(tmp_path):
    adu = np.random.default_rng(1).integers(-3000, 3000, (12, 500)).astype(np.int16)
    path = tmp_path / "R.mat"
    scipy.io.savemat(path, {"val": adu}, format="4")
    header, _ = parse_header("R 12 500 500\n" + "\n".join(f"R.mat 16+24 1000/mV 16 0 0 0 0 {lead}" for lead in LEADS12))
    assert np.array_equal(read_adu(header, path.read_bytes()), adu)


def test_big_endian_mat4():
    adu = np.array([[1, 2, 3], [4, 5, 6]], dtype=">i2")
    name = b"val\0"
    payload = struct.pack(">5i", 1030, 2, 3, 0, len(name)) + name + adu.T.astype(">i2").tobytes()
    header, _ = parse_header("R 2 500 3\nR.mat 16 1/mV 16 0 0 0 0 II\nR.mat 16 1/mV 16 0 0 0 0 V1")
    assert read_adu(header, payload).tolist() == adu.tolist()


@pytest.mark.parametrize("container", ["mat", "dat"])
def test_roundtrip_against_wfdb(tmp_path, container):
    rec = _record(leads=LEADS12, n=2500)
    write_record(tmp_path, rec, container=container)
    ours = read_record(tmp_path / "T0001.hea")
    ref = wfdb.rdrecord(str(tmp_path / "T0001"))
    assert np.array_equal(ours.signals, ref.p_signal.T)
    assert ours.lead_names == ref.sig_name
    assert np.abs(ours.signals - rec.signals).max() <= 0.5 / 1000 + 1e-12


def test_reads_wfdb_written_record(tmp_path):
    rec = _record(leads=("V1", "II", "I"), n=800)
    wfdb.wrsamp(
        "W1", fs=500, units=["mV"] * 3, sig_name=rec.lead_names, p_signal=rec.signals.T, fmt=["16"] * 3,
        adc_gain=[200.0] * 3, baseline=[0] * 3, comments=["Age: 40", "Sex: Male", "Dx: 164890007"], write_dir=str(tmp_path),
    )
    ours = read_record(tmp_path / "W1.hea")
    assert np.abs(ours.signals - rec.signals).max() <= 0.5 / 200 + 1e-12
    assert ours.meta.dx_codes == ["164890007"] and ours.meta.age == 40
    two = select_leads(ours.signals, ours.lead_names)
    assert np.array_equal(two, ours.signals[[1, 0]])


def test_linearity_of_conversion():
    header, _ = parse_header("R 1 500 4\nR.dat 16 250/mV 16 0 0 0 0 II")
    x = np.array([[10, -20, 300, 7]])
    assert np.array_equal(read_signal(header, encode_fmt16(2 * x)), 2 * read_signal(header, encode_fmt16(x)))


# ---------------------------------------------------------------------------
# leads, labels


def test_select_leads_from_twelve():
    m = np.arange(12)[:, None] * np.ones((1, 5))
    out = select_leads(m, LEADS12)
    assert out.shape == (2, 5) and out[:, 0].tolist() == [1, 6]


def test_select_leads_case_and_whitespace():
    out = select_leads(np.array([[1.0], [2.0]]), [" v1", "ii "])
    assert out[:, 0].tolist() == [2.0, 1.0]


def test_missing_lead():
    with pytest.raises(MissingLead):
        select_leads(np.zeros((2, 3)), ["II", "V2"])


def test_label_map_defaults():
    m = load_label_map()
    assert sorted(m.values()) == list(ClassLabel)
    assert map_labels(["426783006"], m) == ClassLabel.NSR


def test_map_labels_rejections():
    m = load_label_map()
    with pytest.raises(MultiLabel):
        map_labels(["164889003", "270492004"], m)
    with pytest.raises(NoRelevantLabel):
        map_labels(["59118001"], m)


@given(st.permutations(["164889003", "59118001", "284470004"]))
def test_map_labels_permutation_invariant(codes):
    assert map_labels(codes, load_label_map()) == ClassLabel.AF


def test_label_map_file(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("# custom\n111 = NSR\n222 = 1AVB  # alias\n")
    assert load_label_map(p) == {"111": ClassLabel.NSR, "222": ClassLabel.AVB1}
    p.write_text("abc = NSR\n")
    with pytest.raises(ValueError):
        load_label_map(p)


# ---------------------------------------------------------------------------
# cohort


def _hdr(age, dx, leads=("II", "V1")):
    sig = "\n".join(f"R.dat 16 1000/mV 16 0 0 0 0 {lead}" for lead in leads)
    age_line = "" if age is None else f"#Age: {age}\n"
    return parse_header(f"R {len(leads)} 500 5000\n{sig}\n{age_line}#Sex: Male\n#Dx: {dx}\n")


def _ten_records():
    """Hand-enumerated: 2 minors, 3 multi-labelled, 5 admissible."""
    spec = [
        (45, "426783006"),
        (60, "164889003"),
        (33, "164890007"),
        (71, "67741000119109"),
        (52, "270492004"),
        (12, "426783006"),
        (17, "164889003"),
        (40, "164889003,270492004"),
        (66, "426783006,164890007"),
        (29, "67741000119109,164889003"),
    ]
    return [(f"P{i:02d}", *_hdr(age, dx)) for i, (age, dx) in enumerate(spec)]


def test_cohort_of_five():
    cohort = build_cohort(_ten_records(), load_label_map(), seed=0)
    assert len(cohort.entries) == 5
    assert cohort.rejection_counts == {"under_min_age": 2, "multi_label": 3}
    assert sorted(e.label for e in cohort.entries) == list(ClassLabel)


def test_cohort_rejection_reasons():
    recs = [
        ("U", *_hdr(None, "426783006")),
        ("L", *_hdr(50, "426783006", leads=("I", "II"))),
        ("N", *_hdr(50, "59118001")),
        ("OK", *_hdr(50, "426783006")),
    ]
    cohort = build_cohort(recs, load_label_map())
    assert dict(cohort.rejections) == {"U": "unknown_age", "L": "missing_lead", "N": "no_relevant_label"}
    kept = build_cohort(recs, load_label_map(), CohortCriteria(keep_unknown_age=True))
    assert {e.record for e in kept.entries} == {"U", "OK"}


def test_empty_cohort():
    with pytest.raises(EmptyCohort):
        build_cohort([], load_label_map())
    with pytest.raises(EmptyCohort):
        build_cohort(_ten_records()[5:7], load_label_map())


def test_cohort_deterministic_and_disjoint():
    recs = [(f"P{i:03d}", *_hdr(30 + i % 50, code)) for i, code in enumerate(itertools.islice(itertools.cycle(load_label_map()), 60))]
    a = build_cohort(recs, load_label_map(), seed=7)
    b = build_cohort(recs, load_label_map(), seed=7)
    assert [(e.record, e.split) for e in a.entries] == [(e.record, e.split) for e in b.entries]
    train = {e.patient_id for e in a.split("train")}
    test = {e.patient_id for e in a.split("test")}
    assert not train & test
    for label in ClassLabel:
        n = sum(e.label == label for e in a.split("train"))
        assert n == 7  # 60 % of 12 patients, rounded


def test_every_entry_meets_criteria(synth50):
    for e in synth50.cohort.entries:
        assert e.meta.age >= 18 and len(e.meta.dx_codes) == 1


def test_manifest_roundtrip(tmp_path):
    cohort = build_cohort(_ten_records(), load_label_map(), seed=0)
    write_manifest(cohort, tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text()
    assert text.splitlines()[0] == "record_id,source,age,sex,label_int,split"
    back = read_manifest(tmp_path / "m.csv")
    assert [(e.record, e.label, e.split, e.meta.age) for e in back.entries] == [
        (e.record, e.label, e.split, e.meta.age) for e in cohort.entries
    ]
