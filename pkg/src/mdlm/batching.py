"""Batch planning for variable-length audio and padding-waste accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mdlm.projector import audio_token_count


@dataclass(frozen=True)
class LengthSample:
    id: int
    duration_s: float

    def __post_init__(self) -> None:
        if not self.duration_s > 0:
            raise ValueError(f"sample {self.id}: duration must be positive")


@dataclass
class Batch:
    ids: list[int]
    durations: list[float]
    padded_s: float


@dataclass
class BucketPlan:
    batches: list[Batch]
    policy: str

    def ids(self) -> list[int]:
        return [i for b in self.batches for i in b.ids]


def as_samples(durations) -> list[LengthSample]:
    return [LengthSample(i, float(d)) for i, d in enumerate(durations)]


def plan_fixed(samples: list[LengthSample], batch_size: int = 8, pad_to_s: float = 30.0) -> BucketPlan:
    """Input-order batches, every member padded to ``pad_to_s`` seconds."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for s in samples:
        if s.duration_s > pad_to_s:
            raise ValueError(f"sample {s.id} is {s.duration_s} s, longer than the {pad_to_s} s pad")
    batches = [
        Batch([s.id for s in chunk], [s.duration_s for s in chunk], pad_to_s)
        for chunk in (samples[i:i + batch_size] for i in range(0, len(samples), batch_size))
    ]
    return BucketPlan(batches, "fixed_pad")


def plan_sorted_buckets(samples: list[LengthSample], batch_size: int) -> BucketPlan:
    """Sort longest-first (ties by id), slice, pad each batch to its longest member."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ordered = sorted(samples, key=lambda s: (-s.duration_s, s.id))
    batches = []
    for i in range(0, len(ordered), batch_size):
        chunk = ordered[i:i + batch_size]
        batches.append(Batch([s.id for s in chunk], [s.duration_s for s in chunk],
                             max(s.duration_s for s in chunk)))
    return BucketPlan(batches, "sorted_bucket")


def padding_waste(plan: BucketPlan) -> float:
    """Fraction of batched audio-seconds that is padding."""
    if not plan.batches:
        raise ValueError("empty plan")
    padded = sum(len(b.ids) * b.padded_s for b in plan.batches)
    real = sum(sum(b.durations) for b in plan.batches)
    return (padded - real) / padded


def token_waste(plan: BucketPlan) -> float:
    """Same accounting in 5 Hz audio tokens instead of seconds."""
    if not plan.batches:
        raise ValueError("empty plan")
    padded = sum(len(b.ids) * audio_token_count(b.padded_s) for b in plan.batches)
    real = sum(audio_token_count(d) for b in plan.batches for d in b.durations)
    return (padded - real) / padded


def length_distribution(n: int, seed: int = 0, short_frac: float = 0.9) -> np.ndarray:
    """Training-length mix: ``short_frac`` uniform in [1, 10] s, the rest uniform in [10, 30] s."""
    rng = np.random.default_rng(seed)
    short = rng.random(n) < short_frac
    return np.where(short, rng.uniform(1.0, 10.0, n), rng.uniform(10.0, 30.0, n))


def write_plan_csv(plan: BucketPlan, path: str | Path, with_tokens: bool = False) -> None:
    header = ["batch_index", "id", "duration_s", "padded_s"] + (["padded_tokens"] if with_tokens else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for index, batch in enumerate(plan.batches):
            for sid, dur in zip(batch.ids, batch.durations):
                row = [index, sid, repr(dur), repr(batch.padded_s)]
                if with_tokens:
                    row.append(audio_token_count(batch.padded_s))
                writer.writerow(row)
