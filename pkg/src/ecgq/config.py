"""Run configuration: YAML file, ``ECGQ_*`` environment overrides, CLI flags.

The file is nested by section; every leaf key is unique across sections so
it maps one-to-one to a flag (``episodes_train`` -> ``--episodes-train``)
and to an environment variable (``ECGQ_EPISODES_TRAIN``).  Precedence, low
to high: built-in defaults, config file, environment, flags.

Example::

    input_dir: data/raw
    output_dir: runs/demo
    seed: 0
    agent:
      reward_variant: R3_softmax
      tau: 0.1
    env:
      keying: grid_hash
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .agent import Hyperparams
from .gridworld import EnvConfig
from .ingest import CohortCriteria
from .preprocess import FilterSpec, InvalidSpec

ENV_PREFIX = "ECGQ_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Option:
    section: str | None
    key: str
    kind: type  # str, int, float, bool, Path or list (of floats)
    default: Any
    help: str = ""

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")

    @property
    def env(self) -> str:
        return ENV_PREFIX + self.key.upper()


_HP = Hyperparams()
_ENV = EnvConfig()
_CC = CohortCriteria()

OPTIONS: tuple[Option, ...] = (
    Option(None, "input_dir", Path, None, "directory of .hea + .mat/.dat records"),
    Option(None, "output_dir", Path, Path("runs/ecgq"), "run output directory"),
    Option(None, "label_map", Path, None, "SNOMED code -> class file (default: packaged map)"),
    Option(None, "seed", int, 0, "master seed"),
    Option(None, "jobs", int, 1, "worker processes for ingest/prepare"),
    Option("cohort", "min_age", float, _CC.min_age, "minimum patient age"),
    Option("cohort", "mono_label", bool, _CC.mono_label, "reject records with more than one class code"),
    Option("cohort", "keep_unknown_age", bool, _CC.keep_unknown_age, "keep records without an age"),
    Option("cohort", "train_fraction", float, _CC.train_fraction, "per-class share of patients used for training"),
    Option("filters", "bandpass_order", int, 4, "Butterworth order"),
    Option("filters", "low_cut", float, 0.1, "bandpass low edge (Hz)"),
    Option("filters", "high_cut", float, 100.0, "bandpass high edge (Hz)"),
    Option("filters", "notch_freqs", list, [50.0, 60.0], "powerline notch frequencies (Hz)"),
    Option("filters", "q_factor", float, 30.0, "notch quality factor"),
    Option("env", "keying", str, _ENV.keying, "state keying: grid_hash or beat_index"),
    Option("env", "clip", float, _ENV.clip, "grid clip range (standardized units)"),
    Option("env", "width", int, _ENV.width, "normalized grid width for grid_hash"),
    Option("env", "nearest_fallback", bool, _ENV.nearest_fallback, "map unseen grid states to the nearest trained one"),
    Option("agent", "alpha", float, _HP.alpha, "learning rate"),
    Option("agent", "gamma", float, _HP.gamma, "discount factor"),
    Option("agent", "tau", float, _HP.tau, "SoftMax temperature"),
    Option("agent", "epsilon_start", float, _HP.epsilon_start, "initial exploration rate"),
    Option("agent", "epsilon_end", float, _HP.epsilon_end, "final exploration rate"),
    Option("agent", "epsilon_decay_episodes", int, _HP.epsilon_decay_episodes, "episodes of linear epsilon decay"),
    Option("agent", "episodes_train", int, _HP.episodes_train, "training episodes"),
    Option("agent", "episodes_test", int, _HP.episodes_test, "test episodes"),
    Option("agent", "eval_period", int, _HP.eval_period, "evaluate every N training episodes"),
    Option("agent", "reward_variant", str, _HP.reward_variant, "R1, R2, R3_greedy or R3_softmax"),
    Option("synth", "per_class", int, 10, "synthetic patients per class"),
    Option("synth", "beats", int, 20, "beats per synthetic record"),
    Option("synth", "noise_snr_db", float, 30.0, "synthetic white-noise SNR (dB); negative disables noise"),
    Option("synth", "container", str, "mat", "synthetic payload container: mat or dat"),
    Option("synth", "templates", Path, None, "YAML class-template overrides"),
)
BY_KEY = {o.key: o for o in OPTIONS}
SECTIONS = sorted({o.section for o in OPTIONS if o.section})


def _coerce(opt: Option, value: Any) -> Any:
    if value is None:
        return None
    try:
        if opt.kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if opt.kind is list:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [float(v) for v in value]
        if opt.kind is Path:
            return Path(value)
        if opt.kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return opt.kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{opt.key}: cannot read {value!r} as {opt.kind.__name__}") from None


def _flatten_file(data: Mapping) -> dict[str, Any]:
    flat = {}
    for name, value in data.items():
        if name in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"section {name!r} must be a mapping")
            for key, v in value.items():
                opt = BY_KEY.get(key)
                if opt is None or opt.section != name:
                    raise ConfigError(f"unknown key {name}.{key}")
                flat[key] = v
        else:
            opt = BY_KEY.get(name)
            if opt is None or opt.section is not None:
                raise ConfigError(f"unknown top-level key {name!r}")
            flat[name] = value
    return flat


def load_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _flatten_file(data)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    return {o.key: environ[o.env] for o in OPTIONS if o.env in environ}


@dataclass
class SynthSettings:
    per_class: int = 10
    beats: int = 20
    noise_snr_db: float | None = 30.0
    container: str = "mat"
    templates: Path | None = None


@dataclass
class RunConfig:
    input_dir: Path | None = None
    output_dir: Path = Path("runs/ecgq")
    label_map: Path | None = None
    seed: int = 0
    jobs: int = 1
    cohort: CohortCriteria = field(default_factory=CohortCriteria)
    bandpass: FilterSpec = field(default_factory=FilterSpec)
    notch: FilterSpec = field(default_factory=lambda: FilterSpec(kind="notch", order=2))
    env: EnvConfig = field(default_factory=EnvConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)
    synth: SynthSettings = field(default_factory=SynthSettings)

    @classmethod
    def from_values(cls, values: Mapping[str, Any]) -> "RunConfig":
        """Build from flat ``key -> value`` overrides on top of defaults."""
        unknown = set(values) - set(BY_KEY)
        if unknown:
            raise ConfigError(f"unknown keys: {sorted(unknown)}")
        v = {o.key: o.default for o in OPTIONS}
        v.update({k: _coerce(BY_KEY[k], x) for k, x in values.items()})
        try:
            snr = v["noise_snr_db"]
            return cls(
                input_dir=v["input_dir"],
                output_dir=v["output_dir"],
                label_map=v["label_map"],
                seed=v["seed"],
                jobs=v["jobs"],
                cohort=CohortCriteria(
                    min_age=v["min_age"],
                    mono_label=v["mono_label"],
                    keep_unknown_age=v["keep_unknown_age"],
                    train_fraction=v["train_fraction"],
                ),
                bandpass=FilterSpec(order=v["bandpass_order"], low_cut=v["low_cut"], high_cut=v["high_cut"]),
                notch=FilterSpec(kind="notch", order=2, notch_freqs=tuple(v["notch_freqs"]), q_factor=v["q_factor"]),
                env=EnvConfig(keying=v["keying"], clip=v["clip"], width=v["width"], nearest_fallback=v["nearest_fallback"]),
                hyper=Hyperparams(
                    alpha=v["alpha"],
                    gamma=v["gamma"],
                    tau=v["tau"],
                    epsilon_start=v["epsilon_start"],
                    epsilon_end=v["epsilon_end"],
                    epsilon_decay_episodes=v["epsilon_decay_episodes"],
                    episodes_train=v["episodes_train"],
                    episodes_test=v["episodes_test"],
                    eval_period=v["eval_period"],
                    reward_variant=v["reward_variant"],
                    seed=v["seed"],
                ),
                synth=SynthSettings(
                    per_class=v["per_class"],
                    beats=v["beats"],
                    noise_snr_db=None if snr is None or snr < 0 else snr,
                    container=v["container"],
                    templates=v["templates"],
                ),
            )
        except (ValueError, InvalidSpec) as exc:
            raise ConfigError(str(exc)) from None

    def validate(self, need_input: bool = False) -> None:
        """Check invariants and that referenced paths exist."""
        for name, path in (("label map", self.label_map), ("template file", self.synth.templates)):
            if path is not None and not path.is_file():
                raise ConfigError(f"{name} not found: {path}")
        if need_input:
            if self.input_dir is None:
                raise ConfigError("input_dir is not set")
            if not self.input_dir.is_dir():
                raise ConfigError(f"input directory not found: {self.input_dir}")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if not 0 < self.cohort.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.synth.container not in ("mat", "dat"):
            raise ConfigError("container must be mat or dat")
        if self.synth.per_class < 1 or self.synth.beats < 2:
            raise ConfigError("synthetic cohort needs per_class >= 1 and beats >= 2")
        try:
            self.hyper.validate()
            # 500 Hz is the working rate after resampling
            self.bandpass.validate(500)
            self.notch.validate(500)
        except (ValueError, InvalidSpec) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        """Nested, JSON-safe view mirroring the file layout."""
        v = {
            "input_dir": self.input_dir,
            "output_dir": self.output_dir,
            "label_map": self.label_map,
            "seed": self.seed,
            "jobs": self.jobs,
            "min_age": self.cohort.min_age,
            "mono_label": self.cohort.mono_label,
            "keep_unknown_age": self.cohort.keep_unknown_age,
            "train_fraction": self.cohort.train_fraction,
            "bandpass_order": self.bandpass.order,
            "low_cut": self.bandpass.low_cut,
            "high_cut": self.bandpass.high_cut,
            "notch_freqs": list(self.notch.notch_freqs),
            "q_factor": self.notch.q_factor,
            "keying": self.env.keying,
            "clip": self.env.clip,
            "width": self.env.width,
            "nearest_fallback": self.env.nearest_fallback,
            "per_class": self.synth.per_class,
            "beats": self.synth.beats,
            "noise_snr_db": self.synth.noise_snr_db,
            "container": self.synth.container,
            "templates": self.synth.templates,
        }
        for o in OPTIONS:
            if o.section == "agent":
                v[o.key] = getattr(self.hyper, o.key)
        out: dict[str, Any] = {}
        for o in OPTIONS:
            val = v[o.key]
            val = str(val) if isinstance(val, Path) else val
            if o.section:
                out.setdefault(o.section, {})[o.key] = val
            else:
                out[o.key] = val
        return out

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of everything that affects outputs."""
        d = self.to_dict()
        d.pop("jobs")  # parallelism does not change results
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def resolve(config_path: str | Path | None, flag_values: Mapping[str, Any], environ=None) -> RunConfig:
    """Merge defaults, file, environment and flags (``None`` flags are unset)."""
    values: dict[str, Any] = {}
    if config_path is not None:
        values.update(load_file(config_path))
    values.update(env_overrides(environ))
    values.update({k: v for k, v in flag_values.items() if v is not None})
    return RunConfig.from_values(values)
