"""Tabular Q-learning over beat states with the five class labels as actions.

Rewards:

* ``R1``: +1 for a correct label, -1 otherwise.
* ``R2``: R1 minus the action-selection time in seconds.
* ``R3_greedy``: R2 plus the row's Qmax (epsilon-greedy policy).
* ``R3_softmax``: R2 plus the probability of the chosen action (SoftMax policy).

``R3_softmax`` acts with Boltzmann sampling at temperature ``tau``; the other
variants act epsilon-greedily with a linear epsilon schedule.
"""

from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .gridworld import EmptySplit, GridEnv, episode_stream
from .labels import N_CLASSES
from .metrics import MetricsReport, confusion, hamming_loss, per_class_metrics

REWARD_VARIANTS = ("R1", "R2", "R3_greedy", "R3_softmax")
QTABLE_MAGIC = b"ECGQTAB1"

Clock = Callable[[], float]


@dataclass
class Hyperparams:
    alpha: float = 0.001
    gamma: float = 0.9
    tau: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_episodes: int = 50
    episodes_train: int = 100
    episodes_test: int = 50
    eval_period: int = 10
    reward_variant: str = "R3_softmax"
    seed: int = 0

    def __post_init__(self):
        self.reward_variant = normalize_variant(self.reward_variant)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0 <= eps <= 1:
                raise ValueError("epsilon must be in [0, 1]")
        if self.episodes_train < 0 or self.episodes_test < 0 or self.eval_period < 1:
            raise ValueError("episode counts must be non-negative and eval_period positive")

    @property
    def policy(self) -> str:
        return "softmax" if self.reward_variant == "R3_softmax" else "epsilon_greedy"

    def epsilon(self, episode: int) -> float:
        """Exploration rate for 1-based ``episode``: linear decay, then flat."""
        if self.epsilon_decay_episodes <= 1:
            return self.epsilon_end
        frac = min(max(episode - 1, 0) / (self.epsilon_decay_episodes - 1), 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def normalize_variant(name: str) -> str:
    for v in REWARD_VARIANTS:
        if name.strip().lower() == v.lower():
            return v
    raise ValueError(f"unknown reward variant {name!r}; choose from {REWARD_VARIANTS}")


class QTable:
    """State key (bytes) -> 5 action values, zero until first update."""

    def __init__(self):
        self.rows: dict[bytes, np.ndarray] = {}
        self.profiles: dict[bytes, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.rows)

    def __contains__(self, key: bytes) -> bool:
        return key in self.rows

    def get(self, key: bytes | None) -> np.ndarray:
        if key is None:
            return np.zeros(N_CLASSES)
        row = self.rows.get(key)
        return np.zeros(N_CLASSES) if row is None else row

    def touch(self, key: bytes) -> np.ndarray:
        row = self.rows.get(key)
        if row is None:
            row = self.rows[key] = np.zeros(N_CLASSES)
        return row

    def save(self, path: str | Path) -> None:
        """Binary layout: magic, u64 row count, then per row (sorted by key)
        u16 key length, key bytes, 5 little-endian float64 values."""
        parts = [QTABLE_MAGIC, struct.pack("<Q", len(self.rows))]
        for key in sorted(self.rows):
            parts.append(struct.pack("<H", len(key)) + key)
            parts.append(np.asarray(self.rows[key], dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "QTable":
        data = Path(path).read_bytes()
        if data[:8] != QTABLE_MAGIC:
            raise ValueError(f"{path} is not a Q-table file")
        (n,) = struct.unpack_from("<Q", data, 8)
        pos, table = 16, cls()
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", data, pos)
            key = data[pos + 2:pos + 2 + klen]
            pos += 2 + klen
            table.rows[key] = np.frombuffer(data, dtype="<f8", count=N_CLASSES, offset=pos).astype(float)
            pos += 8 * N_CLASSES
        return table

    def save_profiles(self, path: str | Path) -> None:
        keys = sorted(self.profiles)
        np.savez(
            path,
            keys=np.array([k.hex() for k in keys]),
            profiles=np.array([self.profiles[k] for k in keys]) if keys else np.zeros((0, 0), np.int8),
        )

    def load_profiles(self, path: str | Path) -> None:
        with np.load(path) as z:
            for k, p in zip(z["keys"], z["profiles"]):
                self.profiles[bytes.fromhex(str(k))] = p

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key"] + [f"q{a}" for a in range(N_CLASSES)])
            for key in sorted(self.rows):
                w.writerow([key.hex()] + [repr(float(v)) for v in self.rows[key]])


def q_update(table: QTable, s: bytes, a: int, r: float, s_next: bytes | None, hp: Hyperparams) -> float:
    """Watkins update of cell (s, a); a terminal successor bootstraps 0."""
    future = 0.0 if s_next is None else float(np.max(table.get(s_next)))
    row = table.touch(s)
    row[a] += hp.alpha * (r + hp.gamma * future - row[a])
    return float(row[a])


def _argmax_random(row: np.ndarray, rng: np.random.Generator) -> int:
    best = np.flatnonzero(row == row.max())
    return int(best[0]) if len(best) == 1 else int(best[rng.integers(len(best))])


def select_epsilon_greedy(row, epsilon: float, rng: np.random.Generator) -> tuple[int, float]:
    row = np.asarray(row, dtype=float)
    if rng.random() < epsilon:
        action = int(rng.integers(len(row)))
    else:
        action = _argmax_random(row, rng)
    return action, float(row.max())


def softmax_probs(row, tau: float) -> np.ndarray:
    z = np.asarray(row, dtype=float) / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def select_softmax(row, tau: float, rng: np.random.Generator) -> tuple[int, float]:
    p = softmax_probs(row, tau)
    action = min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), len(p) - 1)
    return action, float(p[action])


def greedy_confidence(row, hp: Hyperparams, action: int) -> float:
    if hp.reward_variant == "R3_softmax":
        return float(softmax_probs(row, hp.tau)[action])
    return float(np.max(row))


def compute_reward(correct: bool, elapsed: float, confidence: float, variant: str) -> float:
    if elapsed < 0:
        raise ValueError("elapsed time cannot be negative")
    variant = normalize_variant(variant)
    r = 1.0 if correct else -1.0
    if variant == "R1":
        return r
    r -= elapsed
    if variant == "R2":
        return r
    return r + confidence


@dataclass
class EpisodeLog:
    episode: int
    phase: str
    count: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES, dtype=np.int64))
    total_reward: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))
    correct: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES, dtype=np.int64))
    elapsed: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES))

    def record(self, label: int, reward: float, correct: bool, elapsed: float, confidence: float) -> None:
        self.count[label] += 1
        self.total_reward[label] += reward
        self.correct[label] += correct
        self.elapsed[label] += elapsed
        self.confidence[label] += confidence

    def _per(self, arr) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, arr / np.maximum(self.count, 1), 0.0)

    @property
    def accuracy(self) -> np.ndarray:
        return self._per(self.correct)

    @property
    def mean_elapsed(self) -> np.ndarray:
        return self._per(self.elapsed)

    @property
    def mean_confidence(self) -> np.ndarray:
        return self._per(self.confidence)

    @property
    def n(self) -> int:
        return int(self.count.sum())

    @property
    def reward(self) -> float:
        return float(self.total_reward.sum())

    @property
    def mean_reward(self) -> float:
        return self.reward / self.n if self.n else 0.0

    @property
    def overall_accuracy(self) -> float:
        return float(self.correct.sum()) / self.n if self.n else 0.0


@dataclass
class EvalRecord:
    episode: int
    mean_reward: float
    accuracy: float
    hamming_loss: float


@dataclass
class TrainResult:
    table: QTable
    logs: list[EpisodeLog]
    evals: list[EvalRecord]


def resolve_states(table: QTable, env: GridEnv) -> list[bytes]:
    """Map each beat of ``env`` to a trained row.

    Keys already in the table map to themselves.  In ``grid_hash`` mode an
    unseen key maps to the trained state whose normalized level traces are
    closest in L1 distance; otherwise it stays unseen (all-zero row).
    """
    keys = list(env.keys)
    if env.cfg.keying != "grid_hash" or not env.cfg.nearest_fallback:
        return keys
    known = [k for k in sorted(table.rows) if k in table.profiles]
    missing = [i for i, k in enumerate(keys) if k not in table.rows]
    if not known or not missing:
        return keys
    ref = np.array([table.profiles[k] for k in known], dtype=np.int16)
    for i in missing:
        d = np.abs(ref - env.profiles[i].astype(np.int16)).sum(axis=1)
        keys[i] = known[int(np.argmin(d))]
    return keys


def _greedy_pass(table, env, keys, hp, episode, phase, seed, clock, rng):
    log = EpisodeLog(episode, phase)
    preds = np.empty(len(env), dtype=np.int64)
    for i in env.order(seed, episode):
        row = table.get(keys[i])
        t0 = clock()
        action = _argmax_random(row, rng)
        confidence = greedy_confidence(row, hp, action)
        elapsed = max(clock() - t0, 0.0)
        label = int(env.labels[i])
        correct = action == label
        log.record(label, compute_reward(correct, elapsed, confidence, hp.reward_variant), correct, elapsed, confidence)
        preds[i] = action
    return log, preds


def evaluate(table: QTable, env: GridEnv, hp: Hyperparams, episode: int = 0, clock: Clock | None = None) -> EvalRecord:
    """Greedy, update-free pass used for the periodic checkpoints."""
    clock = clock or time.perf_counter
    rng = np.random.default_rng([hp.seed, 2, episode])
    keys = resolve_states(table, env)
    log, preds = _greedy_pass(table, env, keys, hp, episode, "eval", [hp.seed, 3], clock, rng)
    return EvalRecord(episode, log.mean_reward, log.overall_accuracy, hamming_loss(preds, env.labels))


def train(env: GridEnv, hp: Hyperparams, eval_env: GridEnv | None = None, clock: Clock | None = None) -> TrainResult:
    """Run ``hp.episodes_train`` learning episodes over ``env``."""
    if len(env) == 0:
        raise EmptySplit("training split has no beats")
    clock = clock or time.perf_counter
    rng = np.random.default_rng([hp.seed, 1])
    table = QTable()
    if env.cfg.keying == "grid_hash":
        for k, p in zip(env.keys, env.profiles):
            table.profiles.setdefault(k, p)
    softmax = hp.policy == "softmax"
    variant = hp.reward_variant
    logs, evals = [], []
    for episode in range(1, hp.episodes_train + 1):
        log = EpisodeLog(episode, "train")
        eps = hp.epsilon(episode)
        for step in episode_stream(env, hp.seed, episode):
            row = table.get(step.key)
            t0 = clock()
            if softmax:
                action, confidence = select_softmax(row, hp.tau, rng)
            else:
                action, confidence = select_epsilon_greedy(row, eps, rng)
            elapsed = max(clock() - t0, 0.0)
            correct = action == step.label
            reward = compute_reward(correct, elapsed, confidence, variant)
            q_update(table, step.key, action, reward, step.next_key, hp)
            log.record(step.label, reward, correct, elapsed, confidence)
        logs.append(log)
        if eval_env is not None and len(eval_env) and episode % hp.eval_period == 0:
            evals.append(evaluate(table, eval_env, hp, episode, clock))
    # untouched profiles are not trained states
    table.profiles = {k: p for k, p in table.profiles.items() if k in table.rows}
    return TrainResult(table, logs, evals)


def test(table: QTable, env: GridEnv, hp: Hyperparams, clock: Clock | None = None) -> tuple[list[EpisodeLog], MetricsReport]:
    """Exploit-only passes over the held-out split; the table is not modified."""
    if len(env) == 0:
        raise EmptySplit("test split has no beats")
    clock = clock or time.perf_counter
    rng = np.random.default_rng([hp.seed, 4])
    keys = resolve_states(table, env)
    logs, preds, truths = [], [], []
    for episode in range(1, hp.episodes_test + 1):
        log, p = _greedy_pass(table, env, keys, hp, episode, "test", [hp.seed, 5], clock, rng)
        logs.append(log)
        preds.append(p)
        truths.append(env.labels)
    if not logs:
        raise EmptySplit("episodes_test is zero")
    report = per_class_metrics(confusion(np.concatenate(preds), np.concatenate(truths)))
    return logs, report


test.__test__ = False  # not a pytest test


def write_episode_logs(logs: list[EpisodeLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "episode", "class", "count", "total_reward", "accuracy", "mean_elapsed", "mean_confidence"])
        for log in logs:
            for c in range(N_CLASSES):
                w.writerow(
                    [
                        log.phase,
                        log.episode,
                        c,
                        int(log.count[c]),
                        repr(float(log.total_reward[c])),
                        repr(float(log.accuracy[c])),
                        repr(float(log.mean_elapsed[c])),
                        repr(float(log.mean_confidence[c])),
                    ]
                )


def read_episode_logs(path: str | Path) -> list[EpisodeLog]:
    logs: dict[tuple[str, int], EpisodeLog] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["phase"], int(row["episode"]))
            log = logs.setdefault(key, EpisodeLog(key[1], key[0]))
            c, n = int(row["class"]), int(row["count"])
            log.count[c] = n
            log.total_reward[c] = float(row["total_reward"])
            log.correct[c] = int(round(float(row["accuracy"]) * n))
            log.elapsed[c] = float(row["mean_elapsed"]) * n
            log.confidence[c] = float(row["mean_confidence"]) * n
    return list(logs.values())


def write_evals(evals: list[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "mean_reward", "accuracy", "hamming_loss"])
        for e in evals:
            w.writerow([e.episode, repr(e.mean_reward), repr(e.accuracy), repr(e.hamming_loss)])


def read_evals(path: str | Path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        return [
            EvalRecord(int(r["episode"]), float(r["mean_reward"]), float(r["accuracy"]), float(r["hamming_loss"]))
            for r in csv.DictReader(fh)
        ]
