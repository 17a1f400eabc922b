"""Rule-based privileged expert used to collect demonstrations."""

from __future__ import annotations

import math

import numpy as np

from ..plan import N_PATH, PATH_SPACING, WAYPOINT_TIMES, ActionPlan
from .core import (CRUISE_SPEED, LANE_WIDTH, LEFT_Y, RIGHT_Y, VEHICLE_RADIUS,
                   WorldState, to_ego)

RED_LIGHT_RANGE = 15.0
LEAD_BRAKE_RANGE = 15.0
ACC_GAP = 4.0
ACC_GAIN = 1.0
CORRIDOR_HALF_WIDTH = 2.0
HAZARD_HORIZON = 2.0
HAZARD_CLEARANCE = 2 * VEHICLE_RADIUS + 0.5
LANE_CHANGE_LOOKAHEAD = 15.0
LANE_CHANGE_GAP = 6.5
LANE_CHANGE_HORIZON = 3.0
LANE_CHANGE_YIELD = 1.5
LANE_END_MARGIN = 12.0
BLEND_LENGTH = 12.0

_S = np.arange(0.0, 30.0, 0.1)


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def _lane_center(y: float) -> float:
    return RIGHT_Y if y < (RIGHT_Y + LEFT_Y) / 2 else LEFT_Y


def _lane_change_blocked(state: WorldState, target_y: float) -> tuple[bool, float]:
    """Whether a vehicle in the target lane will be within the merge gap over the
    next few seconds; returns the offending vehicle's speed (or inf)."""
    ego = state.ego
    for npc in state.npcs:
        if abs(npc.pose.y - target_y) > LANE_WIDTH / 2 or abs(_wrap(npc.pose.heading - ego.heading)) > 0.6:
            continue
        rel = npc.pose.x - ego.x
        dv = npc.pose.speed - ego.speed
        taus = np.arange(0.0, LANE_CHANGE_HORIZON + 1e-9, 0.1)
        if np.any(np.abs(rel + dv * taus) < LANE_CHANGE_GAP):
            return True, npc.pose.speed
    return False, math.inf


def _lateral_profile(state: WorldState) -> tuple[np.ndarray, float]:
    """World y of the intended path at x = ego.x + s, plus a speed cap."""
    ego = state.ego
    lane = _lane_center(ego.y)
    wanted = float(state.route.y_at(ego.x + LANE_CHANGE_LOOKAHEAD))
    cap = math.inf
    follow_route = True
    if abs(wanted - lane) > 1.0 and abs(ego.y - lane) < 0.8:
        blocked, npc_speed = _lane_change_blocked(state, _lane_center(wanted))
        if blocked:
            follow_route = False
            cap = max(0.0, npc_speed - LANE_CHANGE_YIELD)
            if lane == RIGHT_Y and state.road.right_lane_end - ego.x < LANE_END_MARGIN:
                cap = 0.0
    if follow_route:
        y_ref = state.route.y_at(ego.x + _S)
    else:
        y_ref = np.full_like(_S, lane)
    y = y_ref + (ego.y - y_ref[0]) * (1.0 - _smoothstep(_S / BLEND_LENGTH))
    return y, cap


def _target_speed(state: WorldState, y_prof: np.ndarray, cap: float) -> float:
    ego = state.ego
    v = min(CRUISE_SPEED, cap)
    if state.traffic_light is not None and state.light_state() == "red":
        d = state.traffic_light.stop_x - ego.x
        if 0.0 < d <= RED_LIGHT_RANGE:
            v = 0.0
    curve = np.column_stack([ego.x + _S, y_prof])
    for npc in state.npcs:
        p = npc.pose
        same_dir = abs(_wrap(p.heading - ego.heading)) < 0.6
        gap = p.x - ego.x
        if same_dir:
            if gap <= 0 or gap > _S[-1]:
                continue
            if abs(p.y - float(np.interp(gap, _S, y_prof))) > CORRIDOR_HALF_WIDTH:
                continue
            if npc.braking and gap <= LEAD_BRAKE_RANGE:
                v = 0.0
            else:
                v = min(v, max(0.0, p.speed + ACC_GAIN * (gap - ACC_GAP)))
        else:
            # constant-velocity conflict check against the ego driving the plan at cruise speed
            for tau in np.arange(0.0, HAZARD_HORIZON + 1e-9, 0.1):
                s = CRUISE_SPEED * tau
                ex = ego.x + s
                ey = float(np.interp(s, _S, y_prof))
                nx = p.x + p.speed * math.cos(p.heading) * tau
                ny = p.y + p.speed * math.sin(p.heading) * tau
                if math.hypot(nx - ex, ny - ey) < HAZARD_CLEARANCE:
                    v = 0.0
                    break
    return v


def _resample(curve: np.ndarray, arc_targets: np.ndarray) -> np.ndarray:
    seg = np.hypot(*np.diff(curve, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    return np.column_stack([np.interp(arc_targets, arc, curve[:, 0]),
                            np.interp(arc_targets, arc, curve[:, 1])])


def expert_policy(state: WorldState) -> ActionPlan:
    """Route-following plan: 1 m path points and waypoints at the target speed."""
    ego = state.ego
    y_prof, cap = _lateral_profile(state)
    v = _target_speed(state, y_prof, cap)
    curve = np.column_stack([ego.x + _S, y_prof])
    curve[0] = (ego.x, ego.y)
    path = _resample(curve, PATH_SPACING * np.arange(1, N_PATH + 1))
    wps = _resample(curve, v * np.asarray(WAYPOINT_TIMES))
    return ActionPlan(to_ego(path, ego), to_ego(wps, ego))
