"""Synthetic disruption-like shots, shot files, normalization and sharding.

Each shot is a multi-channel time series sampled every 1 ms. Quiet shots are
AR(1) noise plus slow drifts; disruptive shots end at the disruption and carry
a ramping precursor on a few channels during the last ``lead`` milliseconds.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "Shot",
    "GeneratorParams",
    "Dataset",
    "ChannelStats",
    "Chunks",
    "generate",
    "save_shots",
    "load_shots",
    "channel_stats",
    "normalize",
    "make_targets",
    "make_chunks",
    "shard_epoch",
]

log = logging.getLogger(__name__)

NO_DISRUPTION = 0xFFFFFFFF
_MAGIC = b"SHOT"
_VERSION = 1
_FILE_HEADER = struct.Struct("<4sHI")
_SHOT_HEADER = struct.Struct("<QBII")


@dataclass
class Shot:
    id: int
    channels: np.ndarray  # (T, D) float32
    disruptive: bool
    t_disrupt: int | None = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 2 or self.channels.shape[0] < 1:
            raise ValueError("channels must be a non-empty (T, D) array")
        if self.disruptive:
            if self.t_disrupt is None or not 0 <= self.t_disrupt < self.length:
                raise ValueError(f"shot {self.id}: t_disrupt must lie in [0, T)")
        elif self.t_disrupt is not None:
            raise ValueError(f"shot {self.id}: non-disruptive shots have no t_disrupt")

    @property
    def length(self) -> int:
        return self.channels.shape[0]

    def __eq__(self, other):
        return (isinstance(other, Shot) and self.id == other.id and self.disruptive == other.disruptive
                and self.t_disrupt == other.t_disrupt
                and np.array_equal(self.channels, other.channels))


@dataclass(frozen=True)
class GeneratorParams:
    n_shots: int = 400
    n_channels: int = 4
    length_range: tuple[int, int] = (256, 512)
    disruptive_fraction: float = 0.10
    lead_range: tuple[int, int] = (50, 150)
    precursor_channels: int = 2
    precursor_amplitude: float = 3.0
    noise_scale: float = 1.0
    ar_coef: float = 0.9
    drift_amplitude: float = 0.5
    n_test_shots: int = 100
    # domain shift applied to the test split
    test_noise_mult: float = 1.2
    test_amplitude_mult: float = 0.8
    test_offset: float = 0.3

    def __post_init__(self):
        if not 0 < self.disruptive_fraction < 1:
            raise ValueError("disruptive_fraction must be in (0, 1)")
        if self.length_range[0] <= 30 or self.length_range[0] > self.length_range[1]:
            raise ValueError("length_range must satisfy 30 < T_min <= T_max")
        if self.lead_range[0] < 1 or self.lead_range[0] > self.lead_range[1]:
            raise ValueError("bad lead_range")
        if self.lead_range[1] > self.length_range[0]:
            raise ValueError("lead time cannot exceed the shortest shot")
        if not 1 <= self.precursor_channels <= self.n_channels:
            raise ValueError("precursor_channels must be in [1, n_channels]")


@dataclass
class Dataset:
    train: list[Shot]
    val: list[Shot]
    test: list[Shot]

    def split(self, name: str) -> list[Shot]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _make_shots(params: GeneratorParams, n: int, rng: np.random.Generator, first_id: int,
                noise_mult: float = 1.0, amp_mult: float = 1.0, offset: float = 0.0,
                channel_level=None, channel_scale=None) -> list[Shot]:
    d = params.n_channels
    n_dis = int(round(params.disruptive_fraction * n))
    labels = np.zeros(n, dtype=bool)
    labels[:n_dis] = True
    rng.shuffle(labels)
    sigma = params.noise_scale * noise_mult
    phi = params.ar_coef
    shots = []
    for k in range(n):
        T = int(rng.integers(params.length_range[0], params.length_range[1] + 1))
        eps = rng.standard_normal((T, d)) * sigma * np.sqrt(1 - phi**2)
        x = lfilter([1.0], [1.0, -phi], eps, axis=0)
        t = np.arange(T)[:, None]
        period = rng.uniform(500, 2000, size=d)
        phase = rng.uniform(0, 2 * np.pi, size=d)
        x += params.drift_amplitude * np.sin(2 * np.pi * t / period + phase)
        t_d = None
        if labels[k]:
            t_d = T - 1
            lead = int(rng.integers(params.lead_range[0], params.lead_range[1] + 1))
            chans = rng.choice(d, size=params.precursor_channels, replace=False)
            start = t_d - lead
            ramp = np.clip((np.arange(T) - start) / lead, 0.0, None)
            x[:, chans] += (params.precursor_amplitude * amp_mult * sigma) * ramp[:, None]
        x = (x + offset) * channel_scale + channel_level
        shots.append(Shot(first_id + k, x.astype(np.float32), bool(labels[k]), t_d))
    return shots


def generate(params: GeneratorParams, seed: int) -> Dataset:
    """Train/val (80/20, stratified) and a domain-shifted test split."""
    rng = np.random.default_rng(seed)
    # fixed per-channel units so normalization has something to undo
    level = rng.uniform(-5, 5, size=params.n_channels)
    scale = np.exp(rng.uniform(-1, 2, size=params.n_channels))
    pool = _make_shots(params, params.n_shots, rng, 0, channel_level=level, channel_scale=scale)
    train, val = [], []
    for flag in (True, False):
        group = [s for s in pool if s.disruptive == flag]
        n_train = int(round(0.8 * len(group)))
        train += group[:n_train]
        val += group[n_train:]
    train.sort(key=lambda s: s.id)
    val.sort(key=lambda s: s.id)
    test = _make_shots(params, params.n_test_shots, rng, params.n_shots,
                       noise_mult=params.test_noise_mult, amp_mult=params.test_amplitude_mult,
                       offset=params.test_offset, channel_level=level, channel_scale=scale)
    return Dataset(train, val, test)


# ---------------------------------------------------------------------------
# shot files


def save_shots(path, shots: list[Shot]) -> None:
    if not shots:
        raise ValueError("no shots to save")
    d = shots[0].channels.shape[1]
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(_MAGIC, _VERSION, d))
        for s in shots:
            if s.channels.shape[1] != d:
                raise ValueError(f"shot {s.id} has {s.channels.shape[1]} channels, expected {d}")
            t_d = NO_DISRUPTION if s.t_disrupt is None else s.t_disrupt
            fh.write(_SHOT_HEADER.pack(s.id, int(s.disruptive), t_d, s.length))
            fh.write(s.channels.astype("<f4").tobytes())


def load_shots(path) -> list[Shot]:
    buf = Path(path).read_bytes()
    magic, version, d = _FILE_HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a shot file")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported shot file version {version}")
    pos = _FILE_HEADER.size
    shots = []
    while pos < len(buf):
        sid, dis, t_d, T = _SHOT_HEADER.unpack_from(buf, pos)
        pos += _SHOT_HEADER.size
        n = T * d
        x = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(T, d)
        pos += 4 * n
        shots.append(Shot(sid, x.astype(np.float32), bool(dis), None if t_d == NO_DISRUPTION else t_d))
    return shots


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats(shots: list[Shot]) -> ChannelStats:
    """Per-channel mean/std over every timestep of ``shots`` (the training split)."""
    x = np.concatenate([s.channels for s in shots], axis=0).astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std == 0
    if flat.any():
        log.warning("zero-variance channels %s normalized with unit divisor", np.flatnonzero(flat).tolist())
        std[flat] = 1.0
    return ChannelStats(mean.astype(np.float32), std.astype(np.float32))


def normalize(shots: list[Shot], stats: ChannelStats) -> list[Shot]:
    """Standardize channels with the given stats, in float32."""
    return [Shot(s.id, (s.channels - stats.mean) / stats.std, s.disruptive, s.t_disrupt) for s in shots]


def make_targets(shot: Shot, horizon: int) -> np.ndarray:
    """+1 on [t_disrupt - horizon, t_disrupt] of a disruptive shot, -1 elsewhere."""
    y = -np.ones(shot.length, dtype=np.float32)
    if shot.disruptive:
        y[max(0, shot.t_disrupt - horizon):shot.t_disrupt + 1] = 1.0
    return y


@dataclass
class Chunks:
    x: np.ndarray  # (C, T, D) float32
    y: np.ndarray  # (C, T) float32 in {-1, +1}
    shot_ids: np.ndarray  # (C,)
    offsets: np.ndarray  # (C,)

    def __len__(self):
        return self.x.shape[0]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.x[idx], self.y[idx]


def make_chunks(shots: list[Shot], seq_len: int, horizon: int) -> Chunks:
    """Cut shots into non-overlapping ``seq_len`` windows aligned to the shot end.

    End alignment keeps the disruption inside the last window; the leading
    remainder of each shot is dropped.
    """
    xs, ys, ids, offs = [], [], [], []
    for s in shots:
        y = make_targets(s, horizon)
        for start in range(s.length - seq_len, -1, -seq_len):
            xs.append(s.channels[start:start + seq_len])
            ys.append(y[start:start + seq_len])
            ids.append(s.id)
            offs.append(start)
    if not xs:
        raise ValueError(f"no shot is at least {seq_len} steps long")
    return Chunks(np.stack(xs), np.stack(ys), np.array(ids, dtype=np.int64), np.array(offs, dtype=np.int64))


def shard_epoch(n_chunks: int, batch_size: int, n_workers: int, seed) -> list[list[np.ndarray]]:
    """Per-rank mini-batch streams of chunk indices for one epoch.

    Chunks are shuffled with ``seed`` and dealt round-robin to ranks; every
    rank gets the same number of full batches and the remainder is dropped.
    """
    if n_workers < 1 or batch_size < 1:
        raise ValueError("n_workers and batch_size must be positive")
    steps = n_chunks // (n_workers * batch_size)
    if steps == 0:
        raise ValueError(f"{n_chunks} chunks cannot fill one batch of {batch_size} on {n_workers} workers")
    perm = np.random.default_rng(seed).permutation(n_chunks)
    usable = perm[:steps * n_workers * batch_size]
    streams = []
    for r in range(n_workers):
        mine = usable[r::n_workers]
        streams.append([mine[i * batch_size:(i + 1) * batch_size] for i in range(steps)])
    return streams
