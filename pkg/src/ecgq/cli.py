"""``ecgq`` command line: ingest -> prepare -> train -> test -> report.

Exit codes: 0 ok, 2 configuration error, 3 empty cohort, 4 record failure
during ``prepare``, 5 empty split.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .agent import (
    QTable,
    read_episode_logs,
    read_evals,
    test,
    train,
    write_episode_logs,
    write_evals,
)
from .config import OPTIONS, ConfigError, RunConfig, resolve
from .gridworld import EmptySplit, GridEnv
from .ingest import (
    EmptyCohort,
    IngestError,
    MissingLead,
    build_cohort,
    read_header_file,
    read_manifest,
    read_record,
    write_manifest,
    write_rejections,
)
from .labels import ClassLabel, load_label_map
from .metrics import EmptyMatrix, MetricsReport, ReportError, emit_report
from .pipeline import prepare_record
from .preprocess import SignalTooShort, UnsupportedRate, ZeroVariance
from .qrs import NoBeats, TooFewPeaks, export_beat_table, read_beat_table
from .quality import TooShort
from .synth import InvalidTemplate, load_templates, synth_cohort

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY_COHORT, EXIT_RECORD, EXIT_EMPTY_SPLIT = 0, 2, 3, 4, 5

# data-quality outcomes: the record is dropped from the cohort, not an error
EXCLUSIONS = (ZeroVariance, NoBeats, TooFewPeaks, MissingLead, UnsupportedRate, SignalTooShort, TooShort)


# ---------------------------------------------------------------------------
# output layout


def _path(cfg: RunConfig, *parts: str) -> Path:
    return cfg.output_dir.joinpath(*parts)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_manifest(cfg: RunConfig, command: str) -> Path:
    """Config echo, its hash, the seed and library versions (no timestamps,
    so identical manifests imply identical outputs)."""
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": {
            "ecgq": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pyyaml": yaml.__version__,
        },
    }
    path = _path(cfg, "manifests", f"{command}.json")
    _write_json(path, manifest)
    return path


def _label_map(cfg: RunConfig):
    try:
        return load_label_map(cfg.label_map)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read label map {cfg.label_map}: {exc}") from None


# ---------------------------------------------------------------------------
# ingest


def _scan_header(args):
    path, ref = args
    try:
        header, meta = read_header_file(path)
    except (IngestError, OSError, UnicodeDecodeError) as exc:
        return ref, None, None, f"unreadable_header: {exc}"
    return ref, header, meta, None


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def cmd_ingest(cfg: RunConfig) -> int:
    cfg.validate(need_input=True)
    mapping = _label_map(cfg)
    headers = sorted(cfg.input_dir.rglob("*.hea"))
    items = [(h, h.relative_to(cfg.input_dir).with_suffix("").as_posix()) for h in headers]
    scanned = _pool_map(_scan_header, items, cfg.jobs)
    unreadable = [(ref, reason) for ref, _, _, reason in scanned if reason]
    try:
        cohort = build_cohort(
            ((ref, h, m) for ref, h, m, reason in scanned if not reason),
            mapping,
            cfg.cohort,
            seed=cfg.seed,
        )
    except EmptyCohort as exc:
        print(f"empty cohort: {exc}; {len(headers)} header(s) scanned", file=sys.stderr)
        return EXIT_EMPTY_COHORT
    cohort.rejections = sorted(cohort.rejections + unreadable)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(cohort, _path(cfg, "cohort.csv"))
    write_rejections(cohort, _path(cfg, "rejections.csv"))
    write_run_manifest(cfg, "ingest")
    counts = {c.name: sum(e.label == c for e in cohort.entries) for c in ClassLabel}
    print(f"cohort: {len(cohort.entries)} accepted, {len(cohort.rejections)} rejected of {len(headers)}")
    print("  per class: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    for reason, n in sorted(cohort.rejection_counts.items()):
        print(f"  rejected {reason.split(':')[0]}: {n}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# prepare


def _prepare_one(args):
    """Worker: returns ``(record, status, detail)`` with status ok/excluded/failed."""
    input_dir, out_dir, record, label, bandpass, notch = args
    beats_path = out_dir / "beats" / f"{record}.csv"
    try:
        rec = read_record(input_dir / f"{record}.hea")
        prep = prepare_record(rec, label, bandpass, notch)
    except EXCLUSIONS as exc:
        beats_path.unlink(missing_ok=True)
        return record, "excluded", type(exc).__name__
    except Exception as exc:  # noqa: BLE001 - reported per record, run continues
        beats_path.unlink(missing_ok=True)
        return record, "failed", f"{type(exc).__name__}: {exc}"
    beats_path.parent.mkdir(parents=True, exist_ok=True)
    export_beat_table(prep.beats, beats_path)
    _write_json(
        out_dir / "sqi" / f"{record}.json",
        {"record": record, "raw": prep.sqi_raw.to_dict(), "denoised": prep.sqi_denoised.to_dict()},
    )
    _write_json(
        out_dir / "peaks" / f"{record}.json",
        {"record": record, "fs": prep.fs, "r_peaks": [int(i) for i in prep.peaks.indices]},
    )
    return record, "ok", str(len(prep.beats))


def _require(path: Path, hint: str) -> None:
    if not path.exists():
        raise ConfigError(f"{path} not found; {hint}")


def cmd_prepare(cfg: RunConfig) -> int:
    cfg.validate(need_input=True)
    manifest = _path(cfg, "cohort.csv")
    _require(manifest, "run `ecgq ingest` first")
    cohort = read_manifest(manifest)
    items = [(cfg.input_dir, cfg.output_dir, e.record, e.label, cfg.bandpass, cfg.notch) for e in cohort.entries]
    results = _pool_map(_prepare_one, items, cfg.jobs)
    with open(_path(cfg, "prepare_status.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("record_id", "status", "detail"))
        w.writerows(results)
    write_run_manifest(cfg, "prepare")
    ok = [r for r in results if r[1] == "ok"]
    excluded = [r for r in results if r[1] == "excluded"]
    failed = [r for r in results if r[1] == "failed"]
    n_beats = sum(int(r[2]) for r in ok)
    print(f"prepare: {len(ok)} ok ({n_beats} beats), {len(excluded)} excluded, {len(failed)} failed")
    for record, _, detail in excluded + failed:
        print(f"  {record}: {detail}")
    return EXIT_RECORD if failed else EXIT_OK


# ---------------------------------------------------------------------------
# train / test / report


def load_split_beats(cfg: RunConfig, split: str):
    manifest = _path(cfg, "cohort.csv")
    _require(manifest, "run `ecgq ingest` first")
    beats = []
    for e in read_manifest(manifest).split(split):
        path = _path(cfg, "beats", f"{e.record}.csv")
        if path.is_file():
            beats.extend(read_beat_table(path))
    return beats


def _env(cfg: RunConfig, split: str) -> GridEnv:
    beats = load_split_beats(cfg, split)
    if not beats:
        raise EmptySplit(f"{split} split has no prepared beats")
    return GridEnv.from_beats(beats, cfg.env)


def cmd_train(cfg: RunConfig) -> int:
    cfg.validate()
    train_env = _env(cfg, "train")
    test_beats = load_split_beats(cfg, "test")
    eval_env = GridEnv.from_beats(test_beats, cfg.env) if test_beats else None
    result = train(train_env, cfg.hyper, eval_env=eval_env)
    model = _path(cfg, "model")
    model.mkdir(parents=True, exist_ok=True)
    result.table.save(model / "qtable.bin")
    result.table.to_csv(model / "qtable.csv")
    result.table.save_profiles(model / "states.npz")
    _write_json(model / "model.json", {"keying": cfg.env.keying, "width": cfg.env.width, "clip": cfg.env.clip, "states": len(result.table)})
    logs = _path(cfg, "logs")
    logs.mkdir(parents=True, exist_ok=True)
    write_episode_logs(result.logs, logs / "train_episodes.csv")
    write_evals(result.evals, logs / "evals.csv")
    write_run_manifest(cfg, "train")
    print(f"train: {len(train_env)} beats, {len(result.table)} states, {cfg.hyper.episodes_train} episodes")
    if result.logs:
        print(f"  reward episode 1: {result.logs[0].reward:.4f}, episode {result.logs[-1].episode}: {result.logs[-1].reward:.4f}")
    if result.evals:
        last = result.evals[-1]
        print(f"  eval @{last.episode}: accuracy {last.accuracy:.4f}, hamming loss {last.hamming_loss:.4f}")
    return EXIT_OK


def load_model(cfg: RunConfig) -> QTable:
    model = _path(cfg, "model")
    _require(model / "qtable.bin", "run `ecgq train` first")
    info = json.loads((model / "model.json").read_text())
    if (info["keying"], info["width"], info["clip"]) != (cfg.env.keying, cfg.env.width, cfg.env.clip):
        raise ConfigError(f"model was trained with keying={info['keying']} width={info['width']} clip={info['clip']}")
    table = QTable.load(model / "qtable.bin")
    if (model / "states.npz").is_file():
        table.load_profiles(model / "states.npz")
    return table


def cmd_test(cfg: RunConfig) -> int:
    cfg.validate()
    table = load_model(cfg)
    env = _env(cfg, "test")
    logs, report = test(table, env, cfg.hyper)
    write_episode_logs(logs, _path(cfg, "logs", "test_episodes.csv"))
    _write_json(_path(cfg, "metrics.json"), report.to_dict())
    write_run_manifest(cfg, "test")
    print(f"test: {len(env)} beats x {len(logs)} episodes")
    for m in report.per_class:
        print(f"  {m.label:5s} accuracy {m.accuracy:.4f}  precision {m.precision:.4f}  f1 {m.f1:.4f}")
    print(f"macro accuracy {report.macro['accuracy']:.4f}  hamming loss {report.hamming_loss:.4f}")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    cfg.validate()
    metrics_path = _path(cfg, "metrics.json")
    _require(metrics_path, "run `ecgq test` first")
    metrics = MetricsReport.from_dict(json.loads(metrics_path.read_text()))
    logs_dir = _path(cfg, "logs")
    train_logs = read_episode_logs(logs_dir / "train_episodes.csv") if (logs_dir / "train_episodes.csv").is_file() else []
    test_logs = read_episode_logs(logs_dir / "test_episodes.csv") if (logs_dir / "test_episodes.csv").is_file() else []
    evals = read_evals(logs_dir / "evals.csv") if (logs_dir / "evals.csv").is_file() else []
    written = emit_report(metrics, train_logs, test_logs, evals, _path(cfg, "report"))
    write_run_manifest(cfg, "report")
    for p in written:
        print(p)
    print(f"macro accuracy {metrics.macro['accuracy']:.4f}  hamming loss {metrics.hamming_loss:.4f}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.input_dir is None:
        raise ConfigError("input_dir is not set (synthetic records are written there)")
    cfg.validate()
    cfg.input_dir.mkdir(parents=True, exist_ok=True)
    s = cfg.synth
    try:
        templates = load_templates(s.templates) if s.templates else None
    except (InvalidTemplate, yaml.YAMLError, ValueError) as exc:
        raise ConfigError(f"template file {s.templates}: {exc}") from None
    try:
        cohort, truths = synth_cohort(
            cfg.input_dir,
            s.per_class,
            s.beats,
            seed=cfg.seed,
            noise_snr_db=s.noise_snr_db,
            container=s.container,
            templates=templates,
            criteria=cfg.cohort,
        )
    except EmptyCohort as exc:
        print(f"empty cohort: {exc}", file=sys.stderr)
        return EXIT_EMPTY_COHORT
    _write_json(
        cfg.input_dir / "synth_truth.json",
        {
            name: {"label": t.label.name, "fs": t.fs, "r_samples": [int(i) for i in t.r_samples], "pr": [None if p is None else float(p) for p in t.pr]}
            for name, t in sorted(truths.items())
        },
    )
    write_run_manifest(cfg, "synth")
    print(f"synth: {len(truths)} records written to {cfg.input_dir}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "test": cmd_test,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing


def _add_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML run configuration")
    p.add_argument("--verbose", "-v", action="store_true")
    groups = {}
    for o in OPTIONS:
        title = o.section or "run"
        g = groups.get(title) or groups.setdefault(title, p.add_argument_group(title))
        kw = {"dest": o.key, "default": None, "help": f"{o.help} (default: {o.default})"}
        if o.kind is bool:
            g.add_argument(o.flag, action=argparse.BooleanOptionalAction, **kw)
        elif o.kind is list:
            g.add_argument(o.flag, nargs="+", type=float, metavar="HZ", **kw)
        elif o.kind is Path:
            g.add_argument(o.flag, type=str, metavar="PATH", **kw)
        else:
            g.add_argument(o.flag, type=o.kind, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgq", description="ECG beat classification with tabular Q-learning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "scan headers, filter and split the cohort",
        "prepare": "denoise, score quality, detect QRS and segment beats",
        "synth": "write a synthetic cohort into input_dir",
        "train": "train the Q-table on the train split",
        "test": "evaluate the Q-table on the test split",
        "report": "write metrics JSON, episode CSV and SVG charts",
    }
    for name in COMMANDS:
        _add_options(sub.add_parser(name, help=helps[name], description=helps[name]))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    flags = {o.key: getattr(args, o.key) for o in OPTIONS}
    try:
        cfg = resolve(args.config, flags)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptySplit as exc:
        print(f"empty split: {exc}", file=sys.stderr)
        return EXIT_EMPTY_SPLIT
    except EmptyMatrix as exc:
        print(f"empty split: {exc}", file=sys.stderr)
        return EXIT_EMPTY_SPLIT
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
