"""Pinhole ground-plane camera, frame rasterisation and action masks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..plan import ActionPlan
from .core import (ROAD_Y_MAX, ROAD_Y_MIN, VEHICLE_LENGTH, VEHICLE_WIDTH,
                   WorldState, to_ego, to_world)

FRAME_CHANNELS = 4
FRAME_H = 32
FRAME_W = 64
PATCH = 8
MASK_ROWS = FRAME_H // PATCH
MASK_COLS = FRAME_W // PATCH

CH_DRIVABLE, CH_VEHICLE, CH_RED, CH_ROUTE = range(4)

ROUTE_HALF_WIDTH = 0.5
STOP_STRIP_DEPTH = 2.0
BRAKING_VALUE = 0.5

# sub-pixel sample offsets; a pixel is lit if any sample hits the entity
_SUB_V = (0.125, 0.375, 0.625, 0.875)
_SUB_U = (0.25, 0.75)


@dataclass(frozen=True)
class CameraModel:
    h_cam: float = 1.5
    f_u: float = 32.0
    f_v: float = 32.0
    c_u: float = 32.0
    c_v: float = 8.0
    x_min: float = 1.0
    width: int = FRAME_W
    height: int = FRAME_H

    def __post_init__(self):
        if self.f_u <= 0 or self.f_v <= 0:
            raise ValueError("focal scales must be positive")
        if self.x_min <= 0:
            raise ValueError("x_min must be positive")
        if self.h_cam <= 0:
            raise ValueError("camera height must be positive")


def project_point(p_ego, cam: CameraModel) -> tuple[float, float] | None:
    """Ground point (x forward, y left) to pixel (u, v); None when out of view."""
    x, y = float(p_ego[0]), float(p_ego[1])
    if x < cam.x_min:
        return None
    u = cam.c_u - cam.f_u * (y / x)
    v = cam.c_v + cam.f_v * (cam.h_cam / x)
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return u, v


def action_to_mask(action: ActionPlan, cam: CameraModel, patch: int = PATCH) -> np.ndarray:
    """Boolean (H/patch, W/patch) grid; a patch is set if any plan point lands in it."""
    mask = np.zeros((cam.height // patch, cam.width // patch), dtype=bool)
    for p in action.points():
        uv = project_point(p, cam)
        if uv is not None:
            mask[int(uv[1]) // patch, int(uv[0]) // patch] = True
    return mask


@lru_cache(maxsize=8)
def _ground_samples(cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame ground coordinates of every sub-pixel sample, shape (S, H, W, 2),
    and a validity mask (S, H, W) for samples below the horizon."""
    vs = np.arange(cam.height)[None, :, None] + np.array(_SUB_V)[:, None, None]
    us = np.arange(cam.width)[None, None, :] + np.array(_SUB_U)[:, None, None]
    vv = np.repeat(vs, len(_SUB_U), axis=0)          # (S, H, 1)
    uu = np.tile(us, (len(_SUB_V), 1, 1))            # (S, 1, W)
    vv, uu = np.broadcast_arrays(vv, uu)
    below = vv > cam.c_v
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(below, cam.f_v * cam.h_cam / (vv - cam.c_v), np.inf)
        y = np.where(below, (cam.c_u - uu) * x / cam.f_u, 0.0)
    valid = below & (x >= cam.x_min)
    pts = np.stack([np.where(valid, x, 0.0), np.where(valid, y, 0.0)], axis=-1)
    pts.setflags(write=False)
    valid.setflags(write=False)
    return pts, valid


def render_observation(state: WorldState, cam: CameraModel | None = None) -> np.ndarray:
    """Rasterise the scene into a (4, H, W) float frame with values in [0, 1]."""
    cam = cam or CameraModel()
    pts, valid = _ground_samples(cam)
    world = to_world(pts, state.ego)
    X, Y = world[..., 0], world[..., 1]
    out = np.zeros((FRAME_CHANNELS, cam.height, cam.width))

    out[CH_DRIVABLE] = np.any(valid & state.road.drivable(X, Y), axis=0)

    veh = np.zeros(valid.shape)
    for npc in state.npcs:
        local = to_ego(world, npc.pose)
        inside = (np.abs(local[..., 0]) <= VEHICLE_LENGTH / 2) & (np.abs(local[..., 1]) <= VEHICLE_WIDTH / 2)
        value = BRAKING_VALUE if npc.braking else 1.0
        veh = np.maximum(veh, np.where(valid & inside, value, 0.0))
    out[CH_VEHICLE] = veh.max(axis=0)

    light = state.traffic_light
    if light is not None and light.state_at(state.sim_time) == "red":
        strip = (np.abs(X - light.stop_x) <= STOP_STRIP_DEPTH / 2) & (Y >= ROAD_Y_MIN) & (Y <= ROAD_Y_MAX)
        out[CH_RED] = np.any(valid & strip, axis=0)

    route = np.abs(Y - state.route.y_at(X)) <= ROUTE_HALF_WIDTH
    out[CH_ROUTE] = np.any(valid & route, axis=0)
    return out


def frame_to_text(frame: np.ndarray, mask: np.ndarray | None = None,
                  pred_mask: np.ndarray | None = None) -> str:
    """ASCII view of a frame; vehicles '#', braking '%', red strip 'R', route '.',
    drivable ':'. With masks, patch corners show gt/pred agreement."""
    _, h, w = frame.shape
    rows = []
    for r in range(h):
        line = []
        for c in range(w):
            if frame[CH_VEHICLE, r, c] >= 1.0:
                ch = "#"
            elif frame[CH_VEHICLE, r, c] > 0:
                ch = "%"
            elif frame[CH_RED, r, c] > 0:
                ch = "R"
            elif frame[CH_ROUTE, r, c] > 0:
                ch = "."
            elif frame[CH_DRIVABLE, r, c] > 0:
                ch = ":"
            else:
                ch = " "
            if (mask is not None or pred_mask is not None) and r % PATCH == 0 and c % PATCH == 0:
                g = bool(mask[r // PATCH, c // PATCH]) if mask is not None else False
                p = bool(pred_mask[r // PATCH, c // PATCH]) if pred_mask is not None else False
                ch = {(True, True): "B", (True, False): "G", (False, True): "P"}.get((g, p), "+")
            line.append(ch)
        rows.append("".join(line))
    return "\n".join(rows)


def horizon_row(cam: CameraModel) -> int:
    return int(math.floor(cam.c_v))
