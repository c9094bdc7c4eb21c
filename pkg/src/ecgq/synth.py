"""Parametric two-lead (II, V1) ECG generator with exact ground truth.

Each beat is a sum of Gaussian waves ``amp * exp(-(t - t_R - offset)^2 / (2 width^2))``
placed relative to its R peak.  A wave's extent is taken as ``offset +- 2 width``;
the QRS onset is the start of the Q wave and the P wave spans the lead II
P lobes.  Class overlays (fibrillatory noise, flutter sawtooth) and white
noise at a requested SNR are added on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml
from scipy import signal as sps

from .ingest import Cohort, CohortCriteria, EcgRecord, PatientMeta, build_cohort, read_header_file, write_record
from .labels import ClassLabel, load_label_map

EXTENT = 2.0  # wave extent in widths either side of its centre
NSR_PR = (0.12, 0.20)
MAX_NORMAL_P = 0.12
LAE_V1_WIDTH = 0.04
LAE_V1_DEPTH = 0.1  # mV (1 mm at standard calibration)


class InvalidTemplate(ValueError):
    pass


@dataclass(frozen=True)
class Wave:
    amp: float
    offset: float
    width: float

    @property
    def onset(self) -> float:
        return self.offset - EXTENT * self.width

    @property
    def end(self) -> float:
        return self.offset + EXTENT * self.width


# wave name -> Wave; names starting with "P" are atrial lobes
WaveParams = dict


@dataclass(frozen=True)
class ClassTemplate:
    label: ClassLabel
    lead_ii: WaveParams
    lead_v1: WaveParams
    rr_mean: float
    rr_jitter: float = 0.02
    regime: str = "regular"
    pr_range: tuple[float, float] | None = None
    overlay: str = "none"  # none | fibrillatory | sawtooth
    overlay_amp: tuple[float, float] = (0.0, 0.0)  # mV per lead
    flutter_hz: float = 4.5
    conduction: int = 3

    def p_waves(self, lead: str = "ii") -> dict[str, Wave]:
        waves = self.lead_ii if lead == "ii" else self.lead_v1
        return {k: w for k, w in waves.items() if k.startswith("P") and w.amp != 0}

    @property
    def qrs_onset(self) -> float:
        return self.lead_ii["Q"].onset

    def p_extent(self) -> tuple[float, float] | None:
        ps = self.p_waves("ii")
        if not ps:
            return None
        return min(w.onset for w in ps.values()), max(w.end for w in ps.values())

    def with_pr(self, pr: float) -> "ClassTemplate":
        """Shift every P lobe (both leads) so the PR interval equals ``pr``."""
        ext = self.p_extent()
        if ext is None:
            return self
        shift = (self.qrs_onset - pr) - ext[0]

        def move(waves):
            return {k: replace(w, offset=w.offset + shift) if k.startswith("P") else w for k, w in waves.items()}

        return replace(self, lead_ii=move(self.lead_ii), lead_v1=move(self.lead_v1))

    def validate(self) -> None:
        for lead in (self.lead_ii, self.lead_v1):
            if any(w.width <= 0 for w in lead.values()):
                raise InvalidTemplate("wave widths must be positive")
        if "R" not in self.lead_ii or self.lead_ii["R"].amp <= 0:
            raise InvalidTemplate("lead II R amplitude must be positive")
        if "Q" not in self.lead_ii:
            raise InvalidTemplate("lead II needs a Q wave to anchor QRS onset")
        if self.rr_mean <= 0:
            raise InvalidTemplate("rr_mean must be positive")
        ext = self.p_extent()
        p_dur = None if ext is None else ext[1] - ext[0]
        label = self.label
        if label in (ClassLabel.AF, ClassLabel.AFL):
            if ext is not None or self.p_waves("v1"):
                raise InvalidTemplate(f"{label.name}: no discrete P wave allowed")
            if self.pr_range is not None:
                raise InvalidTemplate(f"{label.name}: PR interval must be absent")
        else:
            if ext is None or self.pr_range is None:
                raise InvalidTemplate(f"{label.name}: needs a P wave and a PR range")
        if label == ClassLabel.NSR:
            if not p_dur < MAX_NORMAL_P:
                raise InvalidTemplate("NSR: P wave must be shorter than 120 ms")
            if not NSR_PR[0] <= self.pr_range[0] <= self.pr_range[1] <= NSR_PR[1]:
                raise InvalidTemplate("NSR: PR must lie within 0.12-0.20 s")
        elif label == ClassLabel.AF:
            if self.regime != "irregular" or self.overlay != "fibrillatory":
                raise InvalidTemplate("AF: needs irregular RR and fibrillatory baseline")
        elif label == ClassLabel.AFL:
            if self.overlay != "sawtooth":
                raise InvalidTemplate("AFL: needs a sawtooth flutter baseline")
        elif label == ClassLabel.LAE:
            if not p_dur > MAX_NORMAL_P:
                raise InvalidTemplate("LAE: lead II P must be longer than 120 ms")
            neg = [w for w in self.p_waves("v1").values() if w.amp < 0]
            if not neg:
                raise InvalidTemplate("LAE: V1 needs a terminal negative P lobe")
            term = max(neg, key=lambda w: w.offset)
            if not (term.end - term.onset > LAE_V1_WIDTH and -term.amp > LAE_V1_DEPTH):
                raise InvalidTemplate("LAE: V1 terminal P must be >40 ms wide and >0.1 mV deep")
        elif label == ClassLabel.AVB1:
            if not self.pr_range[0] > NSR_PR[1]:
                raise InvalidTemplate("1AVB: PR must exceed 0.2 s")
            if not p_dur < MAX_NORMAL_P:
                raise InvalidTemplate("1AVB: P wave must be normal")


def _qrst_ii():
    return {
        "Q": Wave(-0.10, -0.025, 0.008),
        "R": Wave(1.00, 0.0, 0.010),
        "S": Wave(-0.25, 0.025, 0.009),
        "T": Wave(0.30, 0.28, 0.045),
    }


def _qrst_v1():
    return {
        "R": Wave(0.25, -0.005, 0.008),
        "S": Wave(-0.90, 0.025, 0.012),
        "T": Wave(0.10, 0.28, 0.050),
    }


def _normal_p(center: float):
    return (
        {"P": Wave(0.15, center, 0.020)},
        {"P": Wave(0.05, center - 0.02, 0.015), "P2": Wave(-0.05, center + 0.02, 0.015)},
    )


def default_templates() -> dict[ClassLabel, ClassTemplate]:
    """Textbook-ish defaults for the five classes."""
    nsr_ii, nsr_v1 = _normal_p(-0.16)
    lae_ii = {"P": Wave(0.12, -0.20, 0.022), "P2": Wave(0.12, -0.15, 0.022)}
    lae_v1 = {"P": Wave(0.04, -0.205, 0.015), "P2": Wave(-0.16, -0.155, 0.018)}
    t = {
        ClassLabel.NSR: ClassTemplate(
            ClassLabel.NSR, {**nsr_ii, **_qrst_ii()}, {**nsr_v1, **_qrst_v1()}, rr_mean=0.85, pr_range=(0.13, 0.19)
        ),
        ClassLabel.AF: ClassTemplate(
            ClassLabel.AF,
            _qrst_ii(),
            _qrst_v1(),
            rr_mean=0.75,
            regime="irregular",
            overlay="fibrillatory",
            overlay_amp=(0.04, 0.06),
        ),
        ClassLabel.AFL: ClassTemplate(
            ClassLabel.AFL,
            _qrst_ii(),
            _qrst_v1(),
            rr_mean=3 / 4.5,
            rr_jitter=0.0,
            overlay="sawtooth",
            overlay_amp=(0.15, 0.08),
        ),
        ClassLabel.LAE: ClassTemplate(
            ClassLabel.LAE, {**lae_ii, **_qrst_ii()}, {**lae_v1, **_qrst_v1()}, rr_mean=0.85, pr_range=(0.16, 0.20)
        ),
        ClassLabel.AVB1: ClassTemplate(
            ClassLabel.AVB1, {**nsr_ii, **_qrst_ii()}, {**nsr_v1, **_qrst_v1()}, rr_mean=0.95, pr_range=(0.24, 0.32)
        ),
    }
    for label, tpl in t.items():
        lo, hi = tpl.pr_range or (None, None)
        if lo is not None:
            t[label] = tpl.with_pr((lo + hi) / 2)
        t[label].validate()
    return t


_TEMPLATE_SCALARS = {"rr_mean", "rr_jitter", "regime", "overlay", "flutter_hz", "conduction"}


def templates_from_mapping(spec: dict) -> dict[ClassLabel, ClassTemplate]:
    """Override default templates from a nested mapping.

    Keys are class names; values may set scalar fields, ``pr_range`` and
    ``overlay_amp`` (pairs), or per-lead waves (``lead_ii: {P: {amp, offset,
    width}}``; a null wave removes it).  Every result is validated.
    """
    out = default_templates()
    for name, over in (spec or {}).items():
        label = ClassLabel.parse(str(name))
        kw = {}
        for key, value in (over or {}).items():
            if key in ("lead_ii", "lead_v1"):
                waves = dict(getattr(out[label], key))
                for wname, params in value.items():
                    if params is None:
                        waves.pop(wname, None)
                    else:
                        base = waves.get(wname)
                        merged = {**({} if base is None else vars(base)), **params}
                        waves[wname] = Wave(**merged)
                kw[key] = waves
            elif key in ("pr_range", "overlay_amp"):
                kw[key] = None if value is None else tuple(float(v) for v in value)
            elif key in _TEMPLATE_SCALARS:
                kw[key] = value
            else:
                raise InvalidTemplate(f"{label.name}: unknown template field {key!r}")
        try:
            out[label] = replace(out[label], **kw)
        except TypeError as exc:
            raise InvalidTemplate(str(exc)) from None
        out[label].validate()
    return out


def load_templates(path: str | Path) -> dict[ClassLabel, ClassTemplate]:
    return templates_from_mapping(yaml.safe_load(Path(path).read_text()) or {})


@dataclass
class GroundTruth:
    label: ClassLabel
    fs: float
    r_times: np.ndarray
    pr: list[float | None] = field(default_factory=list)
    p_onset: list[float | None] = field(default_factory=list)
    p_offset: list[float | None] = field(default_factory=list)

    @property
    def r_samples(self) -> np.ndarray:
        return np.rint(self.r_times * self.fs).astype(np.int64)


def _rr_sequence(tpl: ClassTemplate, n: int, rng: np.random.Generator) -> np.ndarray:
    if tpl.overlay == "sawtooth":
        return np.full(n, tpl.conduction / tpl.flutter_hz)
    if tpl.regime == "irregular":
        return rng.uniform(0.55, 1.45, n) * tpl.rr_mean
    return np.clip(tpl.rr_mean + rng.normal(0.0, tpl.rr_jitter, n), 0.3, 2.0)


def _add_wave(y: np.ndarray, t: np.ndarray, fs: float, center: float, w: Wave) -> None:
    lo = max(0, int((center - 6 * w.width) * fs))
    hi = min(len(t), int((center + 6 * w.width) * fs) + 2)
    if lo < hi:
        y[lo:hi] += w.amp * np.exp(-((t[lo:hi] - center) ** 2) / (2 * w.width**2))


def _fibrillatory(n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    sos = sps.butter(2, [4.0, 9.0], btype="bandpass", fs=fs, output="sos")
    f = sps.sosfiltfilt(sos, rng.normal(size=n + int(2 * fs)))[int(fs):int(fs) + n]
    return f / f.std()


def synth_record(
    template: ClassTemplate,
    n_beats: int,
    fs: float = 500,
    noise_snr_db: float | None = None,
    seed: int = 0,
    name: str = "SYN00000",
    meta: PatientMeta | None = None,
) -> tuple[EcgRecord, GroundTruth]:
    """Generate ``n_beats`` beats (one R peak each) for leads II and V1."""
    if n_beats < 1:
        raise InvalidTemplate("n_beats must be at least 1")
    template.validate()
    rng = np.random.default_rng(seed)
    rr = _rr_sequence(template, n_beats, rng)
    lead_ext = 0.8
    r_times = lead_ext + np.concatenate([[0.0], np.cumsum(rr[:-1])])
    duration = r_times[-1] + lead_ext
    n = int(np.ceil(duration * fs))
    t = np.arange(n) / fs
    leads = np.zeros((2, n))

    truth = GroundTruth(template.label, fs, r_times)
    pr_lo, pr_hi = template.pr_range or (None, None)
    for k, tr in enumerate(r_times):
        tpl = template
        if pr_lo is not None:
            tpl = template.with_pr(rng.uniform(pr_lo, pr_hi))
            on, off = tpl.p_extent()
            truth.pr.append(tpl.qrs_onset - on)
            truth.p_onset.append(tr + on)
            truth.p_offset.append(tr + off)
        else:
            truth.pr.append(None)
            truth.p_onset.append(None)
            truth.p_offset.append(None)
        prev_rr = rr[k - 1] if k else template.rr_mean
        qt_scale = np.sqrt(np.clip(prev_rr, 0.3, 2.0))
        for i, waves in enumerate((tpl.lead_ii, tpl.lead_v1)):
            for key, w in waves.items():
                if w.amp == 0:
                    continue
                offset = w.offset * qt_scale if key == "T" else w.offset
                _add_wave(leads[i], t, fs, tr + offset, w)

    if template.overlay == "fibrillatory":
        base = _fibrillatory(n, fs, rng)
        for i in range(2):
            leads[i] += template.overlay_amp[i] * base
    elif template.overlay == "sawtooth":
        # flutter waves phase-locked so every `conduction`-th wave precedes a QRS
        phase = 2 * np.pi * template.flutter_hz * (t - r_times[0] + 0.12)
        saw = sps.sawtooth(phase, width=0.15)
        for i in range(2):
            leads[i] -= template.overlay_amp[i] * saw

    if noise_snr_db is not None:
        for i in range(2):
            p_sig = np.mean(leads[i] ** 2)
            leads[i] += rng.normal(0.0, np.sqrt(p_sig / 10 ** (noise_snr_db / 10)), n)

    record = EcgRecord(name, float(fs), leads, ["II", "V1"], meta or PatientMeta(source="SYNTH"))
    return record, truth


def patient_template(base: ClassTemplate, rng: np.random.Generator) -> ClassTemplate:
    """Draw one patient's variant of a class template."""
    amp = rng.uniform(0.85, 1.15, 2)

    def scale(waves, s):
        return {k: replace(w, amp=w.amp * s) for k, w in waves.items()}

    tpl = replace(
        base,
        lead_ii=scale(base.lead_ii, amp[0]),
        lead_v1=scale(base.lead_v1, amp[1]),
        rr_mean=base.rr_mean * rng.uniform(0.9, 1.1),
        flutter_hz=base.flutter_hz * rng.uniform(0.95, 1.05),
    )
    if base.pr_range is not None:
        lo, hi = base.pr_range
        pr = rng.uniform(lo + 0.005, hi - 0.005)
        tpl = replace(tpl.with_pr(pr), pr_range=(pr - 0.005, pr + 0.005))
    tpl.validate()
    return tpl


def synth_cohort(
    out_dir: str | Path,
    per_class: int | dict = 10,
    beats: int | tuple[int, int] = 20,
    seed: int = 0,
    noise_snr_db: float | None = 30.0,
    container: str = "mat",
    templates: dict[ClassLabel, ClassTemplate] | None = None,
    criteria: CohortCriteria | None = None,
) -> tuple[Cohort, dict[str, GroundTruth]]:
    """Write a synthetic cohort as header + payload files and ingest it back.

    ``per_class`` is a patient count for every class or a mapping from
    class to count.  Returns the cohort (built by the regular ingestion
    path) and ground truth keyed by record name.
    """
    templates = templates or default_templates()
    counts = {c: per_class for c in ClassLabel} if isinstance(per_class, int) else dict(per_class)
    if not counts or any(v < 1 for v in counts.values()):
        raise ValueError("every requested class needs at least one patient")
    lo, hi = (beats, beats) if isinstance(beats, int) else beats
    codes = {label: code for code, label in load_label_map().items()}
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    truths: dict[str, GroundTruth] = {}
    idx = 0
    for label in sorted(counts):
        for _ in range(counts[label]):
            name = f"SYN{idx:05d}"
            idx += 1
            tpl = patient_template(templates[ClassLabel(label)], rng)
            meta = PatientMeta(
                age=float(rng.integers(18, 90)),
                sex="M" if rng.random() < 0.5 else "F",
                dx_codes=[codes[ClassLabel(label)]],
                source="SYNTH",
            )
            n_beats = int(rng.integers(lo, hi + 1))
            record, truth = synth_record(tpl, n_beats, noise_snr_db=noise_snr_db, seed=int(rng.integers(2**31)), name=name, meta=meta)
            write_record(out_dir, record, container=container)
            truths[name] = truth
    headers = sorted(out_dir.glob("SYN*.hea"))
    cohort = build_cohort(
        ((h.stem, *read_header_file(h)) for h in headers if h.stem in truths),
        load_label_map(),
        criteria,
        seed=seed,
    )
    return cohort, truths


__all__ = [
    "ClassTemplate",
    "GroundTruth",
    "InvalidTemplate",
    "Wave",
    "default_templates",
    "load_templates",
    "patient_template",
    "synth_cohort",
    "synth_record",
    "templates_from_mapping",
]
