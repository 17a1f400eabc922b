"""Sample buckets and the two-stage weighted sampler.

The toy expert has no throttle, so the acceleration bands use the commanded
longitudinal acceleration as a fraction of the maximum (3 m/s^2).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..toyworld.core import MAX_ACCEL

log = logging.getLogger(__name__)

STATIONARY_SPEED = 0.05
BRAKING_ACCEL = -0.5
STEER_THRESHOLD = 0.05
DEFAULT_BUCKET = "default"


@dataclass(frozen=True)
class Bucket:
    name: str
    predicate: Callable[[dict], bool]
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"bucket {self.name}: weight must be positive")


def _frac(m: dict) -> float:
    return m["accel_cmd"] / MAX_ACCEL


def default_buckets() -> list[Bucket]:
    return [
        Bucket("accel_from_scratch", lambda m: m["speed"] < STATIONARY_SPEED and m["accel_cmd"] > 0),
        Bucket("light_accel", lambda m: 0.2 < _frac(m) < 0.5, 2.0),
        Bucket("medium_accel", lambda m: 0.5 <= _frac(m) < 0.9, 2.0),
        Bucket("strong_accel", lambda m: _frac(m) >= 0.9),
        Bucket("braking", lambda m: m["accel_cmd"] < BRAKING_ACCEL),
        # gentle slowing; steady cruising is left to the default bucket
        Bucket("coasting", lambda m: m["speed"] >= STATIONARY_SPEED
               and BRAKING_ACCEL <= m["accel_cmd"] < -0.05 * MAX_ACCEL),
        Bucket("steer_left", lambda m: m["steer_cmd"] > STEER_THRESHOLD, 3.0),
        Bucket("steer_right", lambda m: m["steer_cmd"] < -STEER_THRESHOLD, 3.0),
        Bucket("rear_hazard", lambda m: m["rear_hazard"]),
        Bucket("front_hazard", lambda m: m["front_hazard"]),
        Bucket("side_hazard", lambda m: m["side_hazard"]),
        Bucket("stop_sign", lambda m: False),
        Bucket("red_light", lambda m: m["red_light_in_range"]),
        Bucket("swerving", lambda m: m["kind"] == "merge"),
        Bucket("pedestrian", lambda m: m["kind"] == "give_way" and (m["side_hazard"] or m["front_hazard"])),
    ]


def assign_buckets(sample_meta: dict, buckets: Sequence[Bucket] | None = None) -> set[str]:
    buckets = default_buckets() if buckets is None else buckets
    names = {b.name for b in buckets if b.predicate(sample_meta)}
    return names or {DEFAULT_BUCKET}


class WeightedSampler:
    """Draw a bucket with probability proportional to its weight, then a member
    uniformly. Empty buckets are dropped with a warning."""

    def __init__(self, metas: Sequence[dict], buckets: Sequence[Bucket] | None = None, seed: int = 0,
                 default_weight: float = 1.0):
        buckets = list(default_buckets() if buckets is None else buckets)
        members: dict[str, list[int]] = {b.name: [] for b in buckets}
        members[DEFAULT_BUCKET] = []
        for i, m in enumerate(metas):
            for name in assign_buckets(m, buckets):
                members[name].append(i)
        weights = {b.name: b.weight for b in buckets}
        weights[DEFAULT_BUCKET] = default_weight
        self.empty = sorted(n for n, idx in members.items() if not idx)
        for n in self.empty:
            log.warning("bucket %r is empty and excluded from sampling", n)
        self.names = [n for n in members if members[n]]
        if not self.names:
            raise ValueError("no samples to draw from")
        self.members = {n: np.asarray(members[n]) for n in self.names}
        w = np.array([weights[n] for n in self.names], dtype=np.float64)
        self.probs = w / w.sum()
        self._rng = np.random.default_rng(seed)

    def draw_buckets(self, n: int) -> np.ndarray:
        return self._rng.choice(len(self.names), size=n, p=self.probs)

    def sample(self, n: int) -> np.ndarray:
        """``n`` dataset indices."""
        which = self.draw_buckets(n)
        out = np.empty(n, dtype=int)
        for j, b in enumerate(which):
            idx = self.members[self.names[b]]
            out[j] = idx[self._rng.integers(len(idx))]
        return out

    def stream(self, batch: int) -> Iterator[np.ndarray]:
        while True:
            yield self.sample(batch)


def weighted_sampler(metas: Sequence[dict], buckets: Sequence[Bucket] | None = None,
                     seed: int = 0) -> WeightedSampler:
    return WeightedSampler(metas, buckets, seed)
