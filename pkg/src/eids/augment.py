"""Subflow generation, on-the-fly flow augmentation, oversampling and split plans.

Every random draw comes from a ``numpy.random.Generator``. :func:`stage_rng`
derives independent streams from ``(seed, epoch, sample index, stage)`` so a
single augmentation of a single sample can be replayed in isolation, and
serial and parallel execution agree bit for bit.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .flowcap import FlowRecord

STAGES = ("jitter", "scale", "drop", "insert", "noise")


class InsufficientSamples(ValueError):
    pass


@dataclass
class AugConfig:
    jitter_frac: float = 0.7
    scale_set: list[float] = field(default_factory=lambda: [0.5, 0.75, 1.0, 1.25, 1.5])
    drop_coeff: float = 0.25
    drop_bias: float = 0.5
    insert_coeff: float = 0.15
    insert_bias: float = 0.5
    noise_pkt_div: int = 3
    noise_byte_div: int = 100
    noise_sigma: float = 0.1
    oversample_factor: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.jitter_frac < 1:
            raise ValueError("jitter_frac must lie in [0, 1)")
        if not self.scale_set or any(s <= 0 for s in self.scale_set):
            raise ValueError("scale_set must be non-empty and positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugConfig":
        """A configuration under which the pipeline returns its input unchanged."""
        return cls(jitter_frac=0.0, scale_set=[1.0], drop_coeff=0.0, insert_coeff=0.0,
                   noise_sigma=0.0, seed=seed)


def stage_rng(seed: int, epoch: int, index: int, stage: int | str) -> np.random.Generator:
    if isinstance(stage, str):
        stage = STAGES.index(stage)
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(epoch, index, stage))
    return np.random.Generator(np.random.PCG64(ss))


@functools.lru_cache(maxsize=4096)
def linear_budget(coeff: float, bias: float, n: int) -> int:
    """``max(0, floor(coeff * n - bias))`` evaluated in exact decimal arithmetic."""
    value = Fraction(str(coeff)) * n - Fraction(str(bias))
    return max(0, math.floor(value))


def _with(rec: FlowRecord, packets=None, timestamps=None) -> FlowRecord:
    packets = rec.packets if packets is None else packets
    timestamps = rec.timestamps if timestamps is None else timestamps
    return FlowRecord(packets, timestamps, rec.label, None, rec.key)


def make_subflows(rec: FlowRecord) -> list[FlowRecord]:
    rec = rec.valid()
    return [FlowRecord(rec.packets[:k], rec.timestamps[:k], rec.label, None, rec.key)
            for k in range(1, rec.n + 1)]


def jitter(rec: FlowRecord, rng: np.random.Generator, cfg: AugConfig = AugConfig()) -> FlowRecord:
    """Perturb every timestamp but the first by U(-f*t_min, f*t_min).

    ``t_min`` is the smaller of the two gaps around a packet in the original
    vector (the last packet only has one). The result is re-sorted and re-anchored at 0.
    """
    rec = rec.valid()
    T = rec.timestamps
    n = len(T)
    if n < 2:
        return rec
    gaps = np.diff(T)
    t_min = np.empty(n - 1)
    t_min[:-1] = np.minimum(gaps[:-1], gaps[1:])
    t_min[-1] = gaps[-1]
    width = cfg.jitter_frac * t_min
    out = T.copy()
    out[1:] = T[1:] + rng.uniform(-width, width)
    out = np.sort(out)
    return _with(rec, timestamps=out - out[0])


def traffic_scale(rec: FlowRecord, rng: np.random.Generator, cfg: AugConfig = AugConfig()) -> FlowRecord:
    rec = rec.valid()
    s = float(cfg.scale_set[rng.integers(len(cfg.scale_set))])
    if s == 1.0:
        return rec
    # scaling every gap by s and re-accumulating from 0 is T * s
    return _with(rec, timestamps=rec.timestamps * s)


def packet_drop(rec: FlowRecord, rng: np.random.Generator, cfg: AugConfig = AugConfig()) -> FlowRecord:
    rec = rec.valid()
    max_drop = linear_budget(cfg.drop_coeff, cfg.drop_bias, rec.n)
    count = int(rng.integers(0, max_drop + 1))
    if count == 0:
        return rec
    # position 0 is never dropped
    gone = rng.choice(np.arange(1, rec.n), size=count, replace=False)
    keep = np.ones(rec.n, dtype=bool)
    keep[gone] = False
    return _with(rec, rec.packets[keep], rec.timestamps[keep])


def packet_insert(rec: FlowRecord, rng: np.random.Generator, cfg: AugConfig = AugConfig(),
                  max_len: int | None = None) -> FlowRecord:
    """Insert all-zero packets after randomly chosen packets.

    An inserted packet takes the midpoint of its neighbours' timestamps, or
    the last timestamp plus the mean gap when appended at the end.
    """
    rec = rec.valid()
    max_ins = linear_budget(cfg.insert_coeff, cfg.insert_bias, rec.n)
    count = int(rng.integers(0, max_ins + 1))
    if max_len is not None:
        count = min(count, max(0, max_len - rec.n))
    if count == 0:
        return rec
    rows = list(rec.packets)
    T = list(rec.timestamps)
    zero = np.zeros(rec.d, dtype=np.float32)
    for _ in range(count):
        after = int(rng.integers(len(T)))
        if after == len(T) - 1:
            mean_gap = (T[-1] - T[0]) / (len(T) - 1) if len(T) > 1 else 0.0
            t_new = T[-1] + mean_gap
        else:
            t_new = 0.5 * (T[after] + T[after + 1])
        rows.insert(after + 1, zero)
        T.insert(after + 1, t_new)
    return _with(rec, np.stack(rows), np.array(T))


def noise_inject(rec: FlowRecord, rng: np.random.Generator, cfg: AugConfig = AugConfig()) -> FlowRecord:
    rec = rec.valid()
    n, d = rec.packets.shape
    n_pkts = int(rng.integers(0, n // cfg.noise_pkt_div + 1)) if cfg.noise_pkt_div else 0
    if n_pkts == 0 or cfg.noise_sigma == 0:
        return rec
    max_bytes = d // cfg.noise_byte_div if cfg.noise_byte_div else 0
    out = rec.packets.copy()
    for row in rng.choice(n, size=n_pkts, replace=False):
        n_bytes = int(rng.integers(0, max_bytes + 1))
        if n_bytes == 0:
            continue
        cols = rng.choice(d, size=n_bytes, replace=False)
        out[row, cols] += rng.normal(0.0, cfg.noise_sigma, size=n_bytes).astype(np.float32)
    np.clip(out, 0.0, 1.0, out=out)
    return _with(rec, packets=out)


def augment_pipeline(rec: FlowRecord, cfg: AugConfig, rng: np.random.Generator | None = None, *,
                     epoch: int = 0, index: int = 0, max_len: int | None = None) -> FlowRecord:
    """Jitter, traffic scaling, packet drop, packet insertion and noise, in that order.

    With ``rng=None`` each stage draws from its own stream derived from
    ``(cfg.seed, epoch, index)``; pass an explicit generator to share one stream.
    """
    def r(stage):
        return rng if rng is not None else stage_rng(cfg.seed, epoch, index, stage)

    rec = jitter(rec, r(0), cfg)
    rec = traffic_scale(rec, r(1), cfg)
    rec = packet_drop(rec, r(2), cfg)
    rec = packet_insert(rec, r(3), cfg, max_len=max_len)
    return noise_inject(rec, r(4), cfg)


def pad_and_mask(rec: FlowRecord, N: int) -> FlowRecord:
    rec = rec.valid()
    if rec.n > N:
        raise ValueError(f"flow of {rec.n} packets does not fit N={N}")
    packets = np.zeros((N, rec.d), dtype=np.float32)
    packets[: rec.n] = rec.packets
    T = np.zeros(N)
    T[: rec.n] = rec.timestamps
    mask = np.zeros(N, dtype=bool)
    mask[: rec.n] = True
    return FlowRecord(packets, T, rec.label, mask, rec.key)


def collate(records: Sequence[FlowRecord], N: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into padded ``(B, N, d)`` bytes, ``(B, N)`` mask and ``(B, N)`` timestamps."""
    d = records[0].d
    X = np.zeros((len(records), N, d), dtype=np.float32)
    T = np.zeros((len(records), N))
    M = np.zeros((len(records), N), dtype=bool)
    for b, rec in enumerate(records):
        rec = rec.valid()
        if rec.n > N:
            raise ValueError(f"flow of {rec.n} packets does not fit N={N}")
        X[b, : rec.n] = rec.packets
        T[b, : rec.n] = rec.timestamps
        M[b, : rec.n] = True
    return X, M, T


def oversample(dataset: Sequence, factor: int) -> list:
    """Repeat every sample ``factor`` times (the same objects, not copies)."""
    if factor < 1:
        raise ValueError("oversampling factor must be at least 1")
    return [sample for sample in dataset for _ in range(factor)]


def expand_training_set(flows: Sequence[FlowRecord], factor: int) -> list[FlowRecord]:
    """All subflows of every flow, oversampled."""
    return oversample([sub for rec in flows for sub in make_subflows(rec)], factor)


@dataclass(frozen=True)
class SplitPlan:
    """Leave-one-out-per-class split: ``test_index[c]`` is class c's held-out sample."""

    split_id: int
    test_index: tuple[int, ...]
    samples_per_class: tuple[int, ...]

    def test(self, cls: int) -> list[int]:
        return [self.test_index[cls]]

    def train(self, cls: int) -> list[int]:
        return [i for i in range(self.samples_per_class[cls]) if i != self.test_index[cls]]


def enumerate_splits(samples_per_class: int | Sequence[int], classes: int | None = None,
                     count: int | None = None, seed: int = 0) -> list[SplitPlan]:
    """Enumerate leave-one-out-per-class plans and optionally pick ``count`` diverse ones.

    Selection is greedy farthest-point over the Hamming distance between
    held-out index vectors, starting from a seeded random plan; ties go to
    the lowest enumeration index.
    """
    if isinstance(samples_per_class, int):
        if classes is None:
            raise ValueError("classes is required with a scalar samples_per_class")
        sizes = (samples_per_class,) * classes
    else:
        sizes = tuple(samples_per_class)
    if not sizes or min(sizes) < 2:
        raise InsufficientSamples("every class needs at least 2 samples to hold one out")
    grid = np.array(list(itertools.product(*(range(s) for s in sizes))), dtype=np.int64)
    plans = [SplitPlan(i, tuple(int(v) for v in row), sizes) for i, row in enumerate(grid)]
    if count is None or count >= len(plans):
        return plans

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(plans)))]
    min_dist = (grid != grid[chosen[0]]).sum(axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, (grid != grid[nxt]).sum(axis=1))
    return [plans[i] for i in chosen]
