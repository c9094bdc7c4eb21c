"""Grid-world view of beats: 21 voltage levels by beat samples.

A standardized beat is clipped to [-1, +1] and each sample lights exactly
one of 21 level cells, like a trace on ECG paper.  The Q-table state is
either the beat's identity (``beat_index``) or a hash of both leads' grids
after resampling them to a fixed width (``grid_hash``), so identical shapes
share a table row.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .qrs import BeatWindow

N_LEVELS = 21
KEYING_MODES = ("beat_index", "grid_hash")


class EmptyBeat(ValueError):
    pass


class EmptySplit(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    keying: str = "grid_hash"
    clip: float = 1.0
    width: int = 50
    fusion: str = "concat"  # both leads enter the key
    nearest_fallback: bool = True

    def __post_init__(self):
        if self.keying not in KEYING_MODES:
            raise ValueError(f"keying must be one of {KEYING_MODES}")
        if self.width < 8:
            raise ValueError("normalized grid width must be at least 8")
        if self.clip <= 0:
            raise ValueError("clip range must be symmetric around zero with positive half-width")


@dataclass(frozen=True)
class GridFrame:
    occupancy: np.ndarray  # (21, W) uint8

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    @property
    def rows(self) -> np.ndarray:
        """Occupied level per column (valid because each column has one cell)."""
        return self.occupancy.argmax(axis=0)


@dataclass(frozen=True)
class StateKey:
    mode: str
    key: bytes


def level_rows(values, clip: float = 1.0) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=float), -clip, clip) / clip
    return np.minimum(np.floor((v + 1.0) / 2.0 * N_LEVELS), N_LEVELS - 1).astype(np.int64)


def encode_grid(beat: BeatWindow, lead: str = "II", clip: float = 1.0) -> GridFrame:
    values = beat.lead_ii if lead.upper() == "II" else beat.lead_v1
    if len(values) == 0:
        raise EmptyBeat(f"{beat.patient_id}#{beat.beat_number} has no samples")
    rows = level_rows(values, clip)
    occ = np.zeros((N_LEVELS, len(rows)), dtype=np.uint8)
    occ[rows, np.arange(len(rows))] = 1
    return GridFrame(occ)


def normalize_rows(rows: np.ndarray, width: int) -> np.ndarray:
    """Resample a level trace to ``width`` columns by plurality vote.

    Target column j pools source columns ``[j*W/width, (j+1)*W/width)``
    and takes the level occupied most often (lowest level on ties).
    """
    rows = np.asarray(rows)
    w = len(rows)
    edges = (np.arange(width + 1) * w) // width
    out = np.empty(width, dtype=np.int64)
    for j in range(width):
        lo, hi = edges[j], max(edges[j + 1], edges[j] + 1)
        seg = rows[min(lo, w - 1):min(hi, w)]
        out[j] = np.bincount(seg, minlength=N_LEVELS).argmax()
    return out


def state_profile(frames: Sequence[GridFrame], cfg: EnvConfig) -> np.ndarray:
    """Concatenated normalized level traces of the two leads."""
    return np.concatenate([normalize_rows(f.rows, cfg.width) for f in frames]).astype(np.int8)


def _grid_bytes(profile: np.ndarray, n_leads: int) -> bytes:
    occ = np.zeros((n_leads, N_LEVELS, len(profile) // n_leads), dtype=np.uint8)
    for i, part in enumerate(np.split(np.asarray(profile, dtype=np.int64), n_leads)):
        occ[i, part, np.arange(len(part))] = 1
    return np.packbits(occ.ravel()).tobytes()


def state_key(frames: Sequence[GridFrame], beat: BeatWindow, cfg: EnvConfig) -> StateKey:
    if cfg.keying == "beat_index":
        return StateKey(cfg.keying, f"{beat.patient_id}\x1f{beat.beat_number}".encode())
    profile = state_profile(frames, cfg)
    digest = hashlib.blake2b(_grid_bytes(profile, len(frames)), digest_size=8).digest()
    return StateKey(cfg.keying, digest)


def frame_to_pbm(frame: GridFrame) -> str:
    """Plain PBM bitmap, highest voltage level on the top row."""
    occ = frame.occupancy[::-1]
    lines = ["P1", f"{occ.shape[1]} {occ.shape[0]}"]
    lines += [" ".join(str(int(v)) for v in row) for row in occ]
    return "\n".join(lines) + "\n"


@dataclass
class Step:
    key: bytes
    label: int
    ref: tuple[str, int]
    next_key: bytes | None

    @property
    def terminal(self) -> bool:
        return self.next_key is None


class GridEnv:
    """Beats of one split, encoded once; episodes are seeded orderings."""

    def __init__(self, keys, labels, refs, profiles, cfg: EnvConfig):
        self.keys = list(keys)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.refs = list(refs)
        self.profiles = np.asarray(profiles, dtype=np.int8)
        self.cfg = cfg

    @classmethod
    def from_beats(cls, beats: Sequence[BeatWindow], cfg: EnvConfig | None = None) -> "GridEnv":
        cfg = cfg or EnvConfig()
        keys, labels, refs, profiles = [], [], [], []
        for b in beats:
            frames = (encode_grid(b, "II", cfg.clip), encode_grid(b, "V1", cfg.clip))
            keys.append(state_key(frames, b, cfg).key)
            labels.append(int(b.label))
            refs.append((b.patient_id, b.beat_number))
            profiles.append(state_profile(frames, cfg))
        profiles = np.array(profiles) if profiles else np.zeros((0, 2 * cfg.width), np.int8)
        return cls(keys, labels, refs, profiles, cfg)

    def __len__(self) -> int:
        return len(self.keys)

    def order(self, seed, episode: int = 0) -> np.ndarray:
        seed = [int(s) for s in np.atleast_1d(seed)]
        rng = np.random.default_rng([*seed, int(episode)])
        return rng.permutation(len(self.keys))


def episode_stream(env: GridEnv, seed, episode: int = 0) -> Iterator[Step]:
    """One pass over the split in a seeded shuffled order.

    The successor of each beat is the next beat in that order; the last
    step has no successor (terminal).
    """
    if len(env) == 0:
        raise EmptySplit("split has no beats")
    order = env.order(seed, episode)
    for pos, i in enumerate(order):
        nxt = env.keys[order[pos + 1]] if pos + 1 < len(order) else None
        yield Step(env.keys[i], int(env.labels[i]), env.refs[i], nxt)
