"""Scripted scenario catalogue.

Each kind isolates one driving ability: emergency braking for a lead
vehicle, overtaking past a faster trailing car, stopping at a red light,
yielding to crossing traffic and merging where the lane ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

from ..errors import ConfigError
from .core import (CRUISE_SPEED, DELTA, DT, LEFT_Y, NPC, RIGHT_Y, SUBSTEPS,
                   VEHICLE_RADIUS, NPCScript, Pose, Road, Route, TrafficLight,
                   WorldState, _speed_update)

SCENARIO_KINDS = ("hard_brake", "lane_change", "red_light", "give_way", "merge")

# a reaction this much after the lead starts braking is the last safe one
REACTION_SLACK = 0.3
CRITICAL_DELAY = 0.35
LEAD_DECEL = 10.0


@dataclass(frozen=True)
class Episode:
    kind: str
    seed: int
    initial: WorldState
    max_ticks: int
    info: tuple[tuple[str, float], ...] = ()

    @property
    def episode_id(self) -> str:
        return f"{self.kind}-{self.seed}"

    def param(self, key: str) -> float:
        return dict(self.info)[key]


@lru_cache(maxsize=None)
def hard_brake_gap(delay: float = CRITICAL_DELAY, speed: float = CRUISE_SPEED,
                   decel: float = LEAD_DECEL) -> float:
    """Initial centre gap at which an ego reacting ``delay`` seconds after the
    lead starts braking stops exactly at disc contact."""
    h = DT / SUBSTEPS
    ego_dist, v, t = 0.0, speed, 0.0
    while t < delay + 10.0:
        v = _speed_update(v, speed if t < delay - 1e-9 else 0.0, h)
        ego_dist += v * h
        t += h
    lead_dist, v = 0.0, speed
    while v > 0.0:
        v = max(0.0, v - decel * h)
        lead_dist += v * h
    return 2 * VEHICLE_RADIUS + ego_dist - lead_dist


def _straight(y: float) -> Route:
    return Route.lane_shift(y, y, 0.0, 0.0)


def _hard_brake(seed: int, brake: bool = True) -> Episode:
    t_brake = 2.0 + 0.1 * ((seed + 10) % 21)
    lead = NPC(Pose(hard_brake_gap(), RIGHT_Y, 0.0, CRUISE_SPEED),
               NPCScript("brake" if brake else "cruise", CRUISE_SPEED,
                         trigger=t_brake if brake else math.inf, decel=LEAD_DECEL))
    events = ((t_brake, "lead_brake"),) if brake else ()
    state = WorldState(0.0, 0, Pose(0.0, RIGHT_Y, 0.0, CRUISE_SPEED), (lead,), None,
                       _straight(RIGHT_Y), Road(), goal_x=60.0, hazard_events=events)
    return Episode("hard_brake", seed, state, 200,
                   (("t_brake", t_brake), ("t_react", t_brake + REACTION_SLACK)))


def _lane_change(seed: int) -> Episode:
    rel0 = -13.0 + 2.0 * ((seed * 3) % 10) / 9
    speed = CRUISE_SPEED + 2.5 + ((seed * 7) % 10) / 9
    npc = NPC(Pose(rel0, LEFT_Y, 0.0, speed), NPCScript("cruise", speed))
    state = WorldState(0.0, 0, Pose(0.0, RIGHT_Y, 0.0, CRUISE_SPEED), (npc,), None,
                       Route.lane_shift(RIGHT_Y, LEFT_Y, 40.0, 15.0), Road(), goal_x=75.0)
    return Episode("lane_change", seed, state, 220, (("npc_rel0", rel0), ("npc_speed", speed)))


def _red_light(seed: int) -> Episode:
    stop_x = 40.0 + (seed % 5)
    duration = 2.5 + 0.25 * ((seed * 3) % 5)
    light = TrafficLight(stop_x, trigger_distance=20.0, red_duration=duration)
    state = WorldState(0.0, 0, Pose(0.0, RIGHT_Y, 0.0, CRUISE_SPEED), (), light,
                       _straight(RIGHT_Y), Road(), goal_x=stop_x + 20.0)
    return Episode("red_light", seed, state, 200, (("stop_x", stop_x), ("red_duration", duration)))


def _give_way(seed: int) -> Episode:
    crossing_x = 30.0
    speed = 4.0 + 4.0 * (seed % 10) / 9
    arrival = 30.0 / CRUISE_SPEED + 0.1 * ((seed * 3) % 7 - 3)
    npc = NPC(Pose(crossing_x, RIGHT_Y + speed * arrival, -math.pi / 2, speed), NPCScript("cruise", speed))
    state = WorldState(0.0, 0, Pose(0.0, RIGHT_Y, 0.0, CRUISE_SPEED), (npc,), None,
                       _straight(RIGHT_Y), Road(crossing_x=crossing_x), goal_x=55.0)
    return Episode("give_way", seed, state, 200, (("npc_speed", speed), ("arrival", arrival)))


def _merge(seed: int) -> Episode:
    rel0 = 2.0 + 4.0 * ((seed * 3) % 10) / 9
    npc = NPC(Pose(rel0, LEFT_Y, 0.0, CRUISE_SPEED), NPCScript("cruise", CRUISE_SPEED))
    state = WorldState(0.0, 0, Pose(0.0, RIGHT_Y, 0.0, CRUISE_SPEED), (npc,), None,
                       Route.lane_shift(RIGHT_Y, LEFT_Y, 30.0, 15.0), Road(right_lane_end=55.0),
                       goal_x=70.0)
    return Episode("merge", seed, state, 220, (("npc_rel0", rel0),))


def make_scenario(kind: str, seed: int, **kwargs) -> Episode:
    """Deterministic episode of ``kind`` parameterised by ``seed``.

    ``hard_brake`` accepts ``brake=False`` for the matched episode in which
    the lead never brakes.
    """
    builders = {"hard_brake": _hard_brake, "lane_change": _lane_change, "red_light": _red_light,
                "give_way": _give_way, "merge": _merge}
    if kind not in builders:
        raise ConfigError(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")
    if kwargs and kind != "hard_brake":
        raise ConfigError(f"scenario {kind!r} takes no options, got {sorted(kwargs)}")
    return builders[kind](int(seed), **kwargs)


def scenario_suite(kinds=SCENARIO_KINDS, seeds=range(10)) -> list[Episode]:
    """Every (kind, seed) pair, kind-major."""
    return [make_scenario(k, s) for k in kinds for s in seeds]


def delta_ticks(delta: float = DELTA, dt: float = DT) -> int:
    n = round(delta / dt)
    if abs(n * dt - delta) > 1e-9:
        raise ConfigError(f"delta {delta} is not a multiple of tick {dt}")
    return n


def with_goal(ep: Episode, goal_x: float) -> Episode:
    return replace(ep, initial=replace(ep.initial, goal_x=goal_x))
