from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from ecgq.agent import Hyperparams, TrainResult, test, train
from ecgq.gridworld import EnvConfig, GridEnv
from ecgq.ingest import Cohort, read_record
from ecgq.metrics import MetricsReport
from ecgq.pipeline import prepare_record
from ecgq.qrs import BeatWindow
from ecgq.synth import GroundTruth, synth_cohort

# criterion id -> (PASS | FAIL | SKIP, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c.split()[0])):
        status, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{status}  #{cid}: {detail}")


@dataclass
class SynthCohort:
    root: object
    cohort: Cohort
    truths: dict[str, GroundTruth]


@pytest.fixture(scope="session")
def synth50(tmp_path_factory) -> SynthCohort:
    """10 patients per class, 20 beats each, written as .hea + .mat."""
    root = tmp_path_factory.mktemp("synth50")
    cohort, truths = synth_cohort(root, per_class=10, beats=20, seed=0)
    return SynthCohort(root, cohort, truths)


@dataclass
class EndToEnd:
    beats: dict[str, list[BeatWindow]]
    train_env: GridEnv
    test_env: GridEnv
    hp: Hyperparams
    result: TrainResult
    test_logs: list = field(default_factory=list)
    report: MetricsReport | None = None
    seconds: float = 0.0


@pytest.fixture(scope="session")
def e2e(synth50) -> EndToEnd:
    """Full pipeline on ``synth50``: prepare, train 100 episodes, test 50."""
    t0 = time.perf_counter()
    beats = {"train": [], "test": []}
    for e in synth50.cohort.entries:
        rec = read_record(synth50.root / f"{e.record}.hea")
        beats[e.split] += prepare_record(rec, e.label).beats
    cfg = EnvConfig(keying="grid_hash")
    train_env = GridEnv.from_beats(beats["train"], cfg)
    test_env = GridEnv.from_beats(beats["test"], cfg)
    hp = Hyperparams(alpha=0.001, gamma=0.9, tau=0.1, reward_variant="R3_softmax", episodes_train=100, seed=0)
    result = train(train_env, hp, eval_env=test_env)
    logs, report = test(result.table, test_env, hp)
    return EndToEnd(beats, train_env, test_env, hp, result, logs, report, time.perf_counter() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
