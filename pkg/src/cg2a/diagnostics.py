"""Gradient-level analyses recomputed from persisted training metrics.

A MetricsLog holds one record per environment step.  Records written
before the first update carry only episode bookkeeping; records written
on update steps add the per-augmentation losses, the applied weights,
the conflict statistics and the pairwise cosine matrix of the raw
gradients.  The log serializes to JSON-lines and every analysis here is
a pure function of it, so replaying a saved log reproduces the in-run
numbers bit for bit.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import StructuralError

_RECORD_KEYS = (
    "step",
    "episode_return",
    "episode_length",
    "losses",
    "weights",
    "fallback_used",
    "conflict_fraction",
    "gamma",
    "grad_norms",
    "cosines",
)


@dataclass
class StepRecord:
    step: int
    episode_return: float | None = None
    episode_length: int | None = None
    losses: list[float] | None = None
    weights: list[float] | None = None
    fallback_used: bool | None = None
    conflict_fraction: float | None = None
    gamma: float | None = None
    grad_norms: list[float] | None = None
    cosines: list[list[float]] | None = None

    @property
    def has_update(self) -> bool:
        return self.losses is not None

    def to_json(self) -> str:
        return json.dumps({key: getattr(self, key) for key in _RECORD_KEYS})

    @classmethod
    def from_json(cls, line: str) -> "StepRecord":
        data = json.loads(line)
        return cls(**{key: data.get(key) for key in _RECORD_KEYS})


class MetricsLog:
    """Append-only per-step records with strictly increasing step indices."""

    def __init__(self, records: Sequence[StepRecord] = ()):
        self.records: list[StepRecord] = []
        for record in records:
            self.append(record)

    def append(self, record: StepRecord):
        if self.records and record.step <= self.records[-1].step:
            raise StructuralError(
                f"step {record.step} does not increase past {self.records[-1].step}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def updates(self, window: tuple[int, int] | None = None) -> list[StepRecord]:
        """Update-carrying records with step in [start, stop)."""
        if window is None:
            chosen = [r for r in self.records if r.has_update]
        else:
            start, stop = window
            if stop <= start:
                raise StructuralError(f"empty window [{start}, {stop})")
            chosen = [r for r in self.records if r.has_update and start <= r.step < stop]
        if not chosen:
            raise StructuralError("window selects no update records")
        return chosen

    def episode_returns(self) -> list[tuple[int, float]]:
        return [
            (r.step, r.episode_return) for r in self.records if r.episode_return is not None
        ]

    def save(self, path):
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as fh:
            for record in self.records:
                fh.write(record.to_json())
                fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "MetricsLog":
        log = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    log.append(StepRecord.from_json(line))
        return log


def magnitude_profile(log: MetricsLog, window: tuple[int, int] | None = None) -> np.ndarray:
    """Mean per-augmentation share of the total gradient norm.

    Each step's L2 norms are normalized to sum to one before averaging,
    so the profile itself sums to one.  A step whose norms are all zero
    contributes the uniform share.
    """
    chosen = log.updates(window)
    norms = np.array([r.grad_norms for r in chosen], dtype=np.float64)
    totals = norms.sum(axis=1, keepdims=True)
    shares = np.where(totals > 0.0, norms / np.where(totals > 0.0, totals, 1.0), 1.0 / norms.shape[1])
    return shares.mean(axis=0)


@dataclass
class CosineProfile:
    mean: np.ndarray
    negative_fraction: np.ndarray
    overall_negative_fraction: float


def cosine_profile(log: MetricsLog, window: tuple[int, int] | None = None) -> CosineProfile:
    """Average pairwise cosine matrix plus how often pairs point apart."""
    chosen = log.updates(window)
    stack = np.array([r.cosines for r in chosen], dtype=np.float64)
    mean = stack.mean(axis=0)
    negative = (stack < 0.0).mean(axis=0)
    n = mean.shape[0]
    off = ~np.eye(n, dtype=bool)
    overall = float((stack < 0.0)[:, off].mean()) if n > 1 else 0.0
    return CosineProfile(mean=mean, negative_fraction=negative, overall_negative_fraction=overall)


def conflict_rate(log: MetricsLog, window: tuple[int, int] | None = None) -> float:
    """Arithmetic mean of the per-step conflicting-component fraction."""
    chosen = log.updates(window)
    return float(np.mean([r.conflict_fraction for r in chosen]))


def default_labels(count: int) -> list[str]:
    return [f"g{i}" for i in range(count)]


def write_magnitudes_csv(path, profile: np.ndarray, labels: Sequence[str] | None = None):
    labels = list(labels) if labels else default_labels(len(profile))
    if len(labels) != len(profile):
        raise StructuralError("one label per augmentation required")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["augmentation", "mean_normalized_magnitude"])
        for label, value in zip(labels, profile):
            writer.writerow([label, repr(float(value))])


def write_cosines_csv(path, profile: CosineProfile, labels: Sequence[str] | None = None):
    n = profile.mean.shape[0]
    labels = list(labels) if labels else default_labels(n)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_i", "pair_j", "mean_cosine", "negative_fraction"])
        for i in range(n):
            for j in range(i + 1, n):
                writer.writerow(
                    [
                        labels[i],
                        labels[j],
                        repr(float(profile.mean[i, j])),
                        repr(float(profile.negative_fraction[i, j])),
                    ]
                )


def write_conflict_csv(path, window: tuple[int, int], rate: float):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_start", "window_end", "mean_conflict_fraction"])
        writer.writerow([window[0], window[1], repr(float(rate))])
