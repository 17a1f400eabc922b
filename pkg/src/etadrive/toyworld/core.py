"""World state and kinematic stepping.

The road runs along +x. The right lane is centred on y = 0 and the left
lane on y = 3.5. Every route is a polyline y(x) with strictly increasing x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..plan import ActionPlan

DT = 0.1
SUBSTEPS = 5
DELTA = 0.5
CRUISE_SPEED = 6.0

VEHICLE_RADIUS = 1.0
VEHICLE_LENGTH = 4.0
VEHICLE_WIDTH = 2.0
WHEELBASE = 2.7
MAX_STEER = 0.5
SPEED_GAIN = 3.0
MAX_ACCEL = 3.0
MAX_BRAKE = 8.0

LANE_WIDTH = 3.5
RIGHT_Y = 0.0
LEFT_Y = 3.5
ROAD_Y_MIN = RIGHT_Y - LANE_WIDTH / 2
ROAD_Y_MAX = LEFT_Y + LANE_WIDTH / 2
LANE_TOLERANCE = LANE_WIDTH / 2

TIME_EPS = 1e-9


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float
    speed: float

    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


def to_ego(points: np.ndarray, pose: Pose) -> np.ndarray:
    """World-frame points (N, 2) into the ego frame (x forward, y left)."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    d = np.asarray(points, dtype=np.float64) - np.array([pose.x, pose.y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_world(points: np.ndarray, pose: Pose) -> np.ndarray:
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    p = np.asarray(points, dtype=np.float64)
    return np.stack([pose.x + c * p[..., 0] - s * p[..., 1],
                     pose.y + s * p[..., 0] + c * p[..., 1]], axis=-1)


@dataclass(frozen=True)
class NPCScript:
    """Scripted longitudinal behaviour of one NPC.

    ``cruise`` holds ``speed``; ``brake`` cruises until ``trigger`` then
    decelerates at ``decel`` to a stop, holds for ``hold`` seconds and
    accelerates back to ``speed``.
    """

    kind: str = "cruise"
    speed: float = CRUISE_SPEED
    trigger: float = math.inf
    decel: float = 10.0
    hold: float = 1.5
    resume_accel: float = 2.0


@dataclass(frozen=True)
class NPC:
    pose: Pose
    script: NPCScript
    phase: str = "cruise"   # cruise | braking | stopped | resume | done
    phase_start: float = 0.0

    @property
    def braking(self) -> bool:
        return self.phase in ("braking", "stopped")


def _advance_npc(npc: NPC, t0: float, h: float) -> NPC:
    sc, p = npc.script, npc.pose
    v, phase, start = p.speed, npc.phase, npc.phase_start
    if phase == "braking":
        v = max(0.0, v - sc.decel * h)
    elif phase == "resume":
        v = min(sc.speed, v + sc.resume_accel * h)
    x = p.x + v * math.cos(p.heading) * h
    y = p.y + v * math.sin(p.heading) * h
    t1 = t0 + h
    if sc.kind == "brake":
        if phase == "cruise" and t1 >= sc.trigger - TIME_EPS:
            phase, start = "braking", t1
        elif phase == "braking" and v <= 0.0:
            phase, start = "stopped", t1
        elif phase == "stopped" and t1 - start >= sc.hold - TIME_EPS:
            phase, start = "resume", t1
        elif phase == "resume" and v >= sc.speed:
            phase, start = "done", t1
    return NPC(Pose(x, y, p.heading, v), sc, phase, start)


@dataclass(frozen=True)
class TrafficLight:
    """Light guarding a stop line; turns red once the ego is within
    ``trigger_distance`` of the line and stays red for ``red_duration``."""

    stop_x: float
    trigger_distance: float = 20.0
    red_duration: float = 3.0
    switch_time: float | None = None

    @property
    def position(self) -> tuple[float, float]:
        return (self.stop_x, ROAD_Y_MIN - 0.5)

    def state_at(self, t: float) -> str:
        if self.switch_time is None:
            return "green"
        if self.switch_time - TIME_EPS <= t < self.switch_time + self.red_duration - TIME_EPS:
            return "red"
        return "green"


@dataclass(frozen=True)
class Road:
    """Two eastbound lanes; the right one may end, a north-south road may cross."""

    right_lane_end: float = math.inf
    crossing_x: float | None = None
    crossing_half_width: float = LANE_WIDTH

    def drivable(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        X, Y = np.asarray(X), np.asarray(Y)
        left = (Y >= RIGHT_Y + LANE_WIDTH / 2) & (Y <= ROAD_Y_MAX)
        right = (Y >= ROAD_Y_MIN) & (Y < RIGHT_Y + LANE_WIDTH / 2) & (X <= self.right_lane_end)
        out = left | right
        if self.crossing_x is not None:
            out = out | (np.abs(X - self.crossing_x) <= self.crossing_half_width)
        return out


@dataclass(frozen=True)
class Route:
    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self):
        if len(self.xs) < 2 or len(self.xs) != len(self.ys):
            raise ValueError("route needs >= 2 points")
        if not np.all(np.diff(self.xs) > 0):
            raise ValueError("route x must be strictly increasing")

    @classmethod
    def lane_shift(cls, y0: float, y1: float, start: float, length: float,
                   x_min: float = -30.0, x_max: float = 400.0) -> "Route":
        """Straight route at ``y0`` that blends to ``y1`` over [start, start+length]."""
        if y0 == y1 or length <= 0:
            return cls((x_min, x_max), (y0, y0))
        xs = np.concatenate([[x_min], np.arange(start, start + length + 1e-9, 1.0), [x_max]])
        frac = np.clip((xs - start) / length, 0.0, 1.0)
        ys = y0 + (y1 - y0) * (0.5 - 0.5 * np.cos(math.pi * frac))
        return cls(tuple(float(v) for v in xs), tuple(float(v) for v in ys))

    def y_at(self, x):
        return np.interp(x, self.xs, self.ys)

    def points(self) -> np.ndarray:
        return np.column_stack([self.xs, self.ys])


@dataclass(frozen=True)
class WorldState:
    sim_time: float
    tick: int
    ego: Pose
    npcs: tuple[NPC, ...]
    traffic_light: TrafficLight | None
    route: Route
    road: Road
    goal_x: float
    hazard_events: tuple[tuple[float, str], ...] = ()
    collision: bool = False
    off_road: bool = False
    ran_red_light: bool = False
    route_completed: bool = False
    steer: float = 0.0
    accel: float = 0.0

    @property
    def terminal(self) -> bool:
        return self.collision or self.off_road or self.ran_red_light or self.route_completed

    @property
    def failed(self) -> bool:
        return self.collision or self.off_road or self.ran_red_light

    def light_state(self) -> str:
        return "green" if self.traffic_light is None else self.traffic_light.state_at(self.sim_time)

    def flags(self) -> dict[str, bool]:
        return {"collision": self.collision, "off_road": self.off_road,
                "ran_red_light": self.ran_red_light, "route_completed": self.route_completed}


def tracker_command(plan: ActionPlan, speed: float) -> tuple[float, float]:
    """Pure-pursuit steering on the plan path and the waypoint-implied target speed."""
    v_target = plan.target_speed()
    pts = np.vstack([np.zeros((1, 2)), plan.path])
    seg = np.hypot(*np.diff(pts, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] < 0.5:
        return 0.0, v_target
    lookahead = min(max(2.0 + 0.5 * speed, 2.5), arc[-1])
    px = np.interp(lookahead, arc, pts[:, 0])
    py = np.interp(lookahead, arc, pts[:, 1])
    dist = math.hypot(px, py)
    if dist < 1e-6:
        return 0.0, v_target
    alpha = math.atan2(py, px)
    steer = math.atan(2.0 * WHEELBASE * math.sin(alpha) / dist)
    return float(np.clip(steer, -MAX_STEER, MAX_STEER)), v_target


def _speed_update(v: float, v_target: float, h: float) -> float:
    a = min(max(SPEED_GAIN * (v_target - v), -MAX_BRAKE), MAX_ACCEL)
    return max(0.0, v + a * h)


def step_world(state: WorldState, ego_action: ActionPlan, dt: float = DT) -> WorldState:
    """Advance the world by ``dt`` with the ego tracking ``ego_action``.

    Terminal states are returned unchanged. Collision, leaving the road and
    crossing a red stop line set flags instead of raising.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.terminal:
        return state
    steer, v_target = tracker_command(ego_action, state.ego.speed)
    h = dt / SUBSTEPS
    ego = state.ego
    x, y, th, v = ego.x, ego.y, ego.heading, ego.speed
    npcs = state.npcs
    light = state.traffic_light
    t = state.sim_time
    collision = off_road = ran_red = False
    for _ in range(SUBSTEPS):
        v = _speed_update(v, v_target, h)
        x_prev = x
        x += v * math.cos(th) * h
        y += v * math.sin(th) * h
        th += v / WHEELBASE * math.tan(steer) * h
        npcs = tuple(_advance_npc(n, t, h) for n in npcs)
        t += h
        if light is not None:
            if light.switch_time is None and light.stop_x - x <= light.trigger_distance:
                light = replace(light, switch_time=t)
            if light.state_at(t) == "red" and x_prev < light.stop_x <= x:
                ran_red = True
        for n in npcs:
            if math.hypot(n.pose.x - x, n.pose.y - y) < 2 * VEHICLE_RADIUS:
                collision = True
        if not bool(state.road.drivable(x, y)):
            off_road = True
        if collision or off_road or ran_red:
            break
    done = (not (collision or off_road or ran_red) and x >= state.goal_x
            and abs(y - float(state.route.y_at(state.goal_x))) < LANE_TOLERANCE)
    return replace(
        state,
        sim_time=round(state.sim_time + dt, 9),
        tick=state.tick + 1,
        ego=Pose(x, y, th, v),
        npcs=npcs,
        traffic_light=light,
        collision=collision,
        off_road=off_road,
        ran_red_light=ran_red,
        route_completed=done,
        steer=steer,
        accel=(v - ego.speed) / dt,
    )


def target_waypoints(state: WorldState, ahead: tuple[float, ...] = (8.0, 16.0)) -> np.ndarray:
    """Route points ``ahead`` metres down-road, in the ego frame, shape (K, 2)."""
    xs = state.ego.x + np.asarray(ahead)
    pts = np.column_stack([xs, state.route.y_at(xs)])
    return to_ego(pts, state.ego)


def conditioning(state: WorldState) -> np.ndarray:
    """Speed followed by the flattened target waypoints: [v, w1x, w1y, w2x, w2y]."""
    return np.concatenate([[state.ego.speed], target_waypoints(state).reshape(-1)])
