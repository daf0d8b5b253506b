"""Evaluation metrics: EMA smoothing, rounds-to-target, and the global
training objective (unweighted mean of per-client mean losses)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Partition
from .errors import StructuralError
from .models import ModelSpec, loss


@dataclass(frozen=True)
class EmaSeries:
    """A raw series together with its running exponential moving average.

    The smoothed series initializes to the first raw value, which makes a
    constant series a fixed point of the recurrence.
    """

    raw: tuple = ()
    smoothed: tuple = ()
    decay: float = 0.9

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise StructuralError("decay must lie in (0, 1)")
        if len(self.raw) != len(self.smoothed):
            raise StructuralError("raw and smoothed series must have equal length")

    @property
    def last(self) -> float:
        return self.smoothed[-1] if self.smoothed else math.nan


def ema_update(series: EmaSeries, value: float) -> EmaSeries:
    if not math.isfinite(value):
        raise StructuralError(f"EMA input must be finite, got {value!r}")
    if series.smoothed:
        smooth = series.decay * series.smoothed[-1] + (1.0 - series.decay) * value
    else:
        smooth = value
    return replace(series, raw=series.raw + (value,),
                   smoothed=series.smoothed + (smooth,))


@dataclass(frozen=True)
class Saturated:
    """Marker for a target never reached within the round limit."""

    limit: int

    def __str__(self) -> str:
        return f"{self.limit}+"


def rounds_to_target(smoothed, target: float, limit: int):
    """1-based index of the first smoothed value >= target, scanning at
    most ``limit`` entries; Saturated(limit) when never reached."""
    if not 0 < target < 1:
        raise StructuralError("target must lie in (0, 1)")
    for i, v in enumerate(smoothed):
        if i >= limit:
            break
        if v >= target:
            return i + 1
    return Saturated(limit)


def global_loss(spec: ModelSpec, params: np.ndarray, partition: Partition,
                dataset: Dataset) -> float:
    """Mean over clients of the client's mean loss on its shard.

    With the equal-size shards the partitioners guarantee, this matches
    the plain whole-dataset loss up to reduction rounding.
    """
    values = [loss(spec, params, dataset.to_batch(shard))
              for shard in partition.assignments]
    return math.fsum(values) / len(values)
