"""Expert demonstrations: collection, in-memory dataset and the record file."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ContractError
from ..plan import ActionPlan
from ..toyworld import (CameraModel, Episode, WorldState, action_to_mask, conditioning,
                        expert_policy, render_observation, step_world, tracker_command, with_goal)
from ..toyworld.core import DT, MAX_ACCEL, MAX_BRAKE, SPEED_GAIN, VEHICLE_RADIUS, to_ego
from ..toyworld.expert import RED_LIGHT_RANGE

RECORD_MAGIC = b"ETAD"
RECORD_VERSION = 1
FRAME_SHAPE = (4, 32, 64)
HAZARD_HORIZON = 3.0


class CollectionError(RuntimeError):
    """The expert failed during collection; the data would be unusable."""

    def __init__(self, episode_id: str, tick: int, flags: dict):
        super().__init__(f"expert failed in episode {episode_id} at tick {tick}: {flags}")
        self.episode_id = episode_id
        self.tick = tick


def encode_frame(frame: np.ndarray) -> np.ndarray:
    """Frames only hold 0, 0.5 and 1; store them as uint8 half-steps."""
    codes = np.rint(frame * 2.0)
    if not np.array_equal(codes / 2.0, frame):
        raise ContractError("frame values are not multiples of 0.5")
    return codes.astype(np.uint8)


def decode_frames(codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) * 0.5


@dataclass
class Dataset:
    frames_t: np.ndarray        # (N, 4, 32, 64) uint8 codes
    frames_prev: np.ndarray     # (N, 4, 32, 64) uint8 codes
    cond_t: np.ndarray          # (N, 5)
    cond_prev: np.ndarray       # (N, 5)
    act_t: np.ndarray           # (N, 14, 2) expert residuals at t
    act_prev: np.ndarray        # (N, 14, 2) expert residuals at t - delta
    masks: np.ndarray           # (N, 4, 8) bool
    meta: list[dict]
    delta_ticks: int
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.meta)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.frames_t[idx], self.frames_prev[idx], self.cond_t[idx], self.cond_prev[idx],
                       self.act_t[idx], self.act_prev[idx], self.masks[idx],
                       [self.meta[i] for i in idx], self.delta_ticks, dict(self.header))

    def batch(self, idx: Sequence[int]) -> dict[str, np.ndarray]:
        idx = np.asarray(idx, dtype=int)
        return {
            "frame_t": decode_frames(self.frames_t[idx]),
            "frame_prev": decode_frames(self.frames_prev[idx]),
            "cond_t": self.cond_t[idx],
            "cond_prev": self.cond_prev[idx],
            "act_t": self.act_t[idx],
            "act_prev": self.act_prev[idx],
            "mask": self.masks[idx].astype(np.float64),
        }

    def kinds(self) -> list[str]:
        return [m["kind"] for m in self.meta]


def _hazards(state: WorldState) -> dict[str, bool]:
    """Constant speed and heading extrapolation; classify by present bearing."""
    ego = state.ego
    out = {"front_hazard": False, "rear_hazard": False, "side_hazard": False}
    taus = np.arange(0.0, HAZARD_HORIZON + 1e-9, 0.1)
    ex = ego.x + ego.speed * math.cos(ego.heading) * taus
    ey = ego.y + ego.speed * math.sin(ego.heading) * taus
    for npc in state.npcs:
        p = npc.pose
        nx = p.x + p.speed * math.cos(p.heading) * taus
        ny = p.y + p.speed * math.sin(p.heading) * taus
        if not np.any(np.hypot(nx - ex, ny - ey) < 2 * VEHICLE_RADIUS):
            continue
        rel = to_ego(np.array([[p.x, p.y]]), ego)[0]
        bearing = abs(math.degrees(math.atan2(rel[1], rel[0])))
        if bearing <= 30.0:
            out["front_hazard"] = True
        elif bearing >= 150.0:
            out["rear_hazard"] = True
        else:
            out["side_hazard"] = True
    return out


def tick_meta(state: WorldState, action: ActionPlan) -> dict:
    """Quantities the bucket predicates look at."""
    steer, v_target = tracker_command(action, state.ego.speed)
    accel = min(max(SPEED_GAIN * (v_target - state.ego.speed), -MAX_BRAKE), MAX_ACCEL)
    light = state.traffic_light
    red_in_range = (light is not None and state.light_state() == "red"
                    and 0.0 < light.stop_x - state.ego.x <= RED_LIGHT_RANGE)
    meta = {"speed": state.ego.speed, "accel_cmd": accel, "steer_cmd": steer,
            "red_light_in_range": bool(red_in_range)}
    meta.update(_hazards(state))
    return meta


def rollout_expert(episode: Episode, ticks: int) -> tuple[list[WorldState], list[ActionPlan]]:
    """Expert rollout of exactly ``ticks`` steps (route completion does not stop it)."""
    ep = with_goal(episode, math.inf)
    state = ep.initial
    states, actions = [], []
    for _ in range(ticks):
        action = expert_policy(state)
        states.append(state)
        actions.append(action)
        nxt = step_world(state, action, DT)
        if nxt.failed:
            raise CollectionError(episode.episode_id, nxt.tick, nxt.flags())
        state = nxt
    return states, actions


def collect_dataset(episodes: Iterable[Episode], delta_ticks: int = 5, ticks: int = 100,
                    cam: CameraModel | None = None) -> Dataset:
    """Roll the expert through every episode and emit one sample per tick >= delta."""
    cam = cam or CameraModel()
    cols: dict[str, list] = {k: [] for k in ("ft", "fp", "ct", "cp", "at", "ap", "m")}
    meta: list[dict] = []
    for ep in episodes:
        states, actions = rollout_expert(ep, ticks)
        frames = [encode_frame(render_observation(s, cam)) for s in states]
        conds = [conditioning(s) for s in states]
        res = [a.residuals() for a in actions]
        for k in range(delta_ticks, ticks):
            cols["ft"].append(frames[k])
            cols["fp"].append(frames[k - delta_ticks])
            cols["ct"].append(conds[k])
            cols["cp"].append(conds[k - delta_ticks])
            cols["at"].append(res[k])
            cols["ap"].append(res[k - delta_ticks])
            cols["m"].append(action_to_mask(actions[k], cam))
            m = {"episode": ep.episode_id, "kind": ep.kind, "seed": ep.seed, "tick": k,
                 "prev_tick": k - delta_ticks, "sim_time": states[k].sim_time,
                 "prev_sim_time": states[k - delta_ticks].sim_time}
            m.update(tick_meta(states[k], actions[k]))
            meta.append(m)
    if not meta:
        raise ContractError("no samples collected (ticks <= delta?)")
    return Dataset(np.stack(cols["ft"]), np.stack(cols["fp"]), np.stack(cols["ct"]), np.stack(cols["cp"]),
                   np.stack(cols["at"]), np.stack(cols["ap"]), np.stack(cols["m"]), meta, delta_ticks,
                   {"delta_ticks": delta_ticks, "ticks": ticks})


# ---------------------------------------------------------------------------
# record file: magic, version byte, u32 header length + JSON header, then
# u32-length-prefixed zlib records (JSON meta followed by the raw arrays)


def _pack(ds: Dataset, i: int) -> bytes:
    meta = json.dumps(ds.meta[i]).encode()
    body = b"".join([
        struct.pack("<I", len(meta)), meta,
        ds.frames_t[i].tobytes(), ds.frames_prev[i].tobytes(),
        ds.cond_t[i].astype("<f8").tobytes(), ds.cond_prev[i].astype("<f8").tobytes(),
        ds.act_t[i].astype("<f8").tobytes(), ds.act_prev[i].astype("<f8").tobytes(),
        ds.masks[i].astype(np.uint8).tobytes(),
    ])
    return zlib.compress(body, 6)


def save_dataset(path: str | Path, ds: Dataset, header: dict | None = None) -> None:
    head = dict(ds.header)
    head.update(header or {})
    head.update({"count": len(ds), "delta_ticks": ds.delta_ticks})
    raw = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC + bytes([RECORD_VERSION]) + struct.pack("<I", len(raw)) + raw)
        for i in range(len(ds)):
            blob = _pack(ds, i)
            fh.write(struct.pack("<I", len(blob)) + blob)


def load_dataset(path: str | Path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != RECORD_MAGIC:
        raise ContractError(f"{path}: not a dataset record file")
    if blob[4] != RECORD_VERSION:
        raise ContractError(f"{path}: unsupported record version {blob[4]}")
    (hlen,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9:9 + hlen])
    pos = 9 + hlen
    n_frame = int(np.prod(FRAME_SHAPE))
    cols: dict[str, list] = {k: [] for k in ("ft", "fp", "ct", "cp", "at", "ap", "m")}
    meta = []
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        body = zlib.decompress(blob[pos + 4:pos + 4 + n])
        pos += 4 + n
        (mlen,) = struct.unpack_from("<I", body, 0)
        meta.append(json.loads(body[4:4 + mlen]))
        off = 4 + mlen

        def take(count, dtype, shape):
            nonlocal off
            size = count * np.dtype(dtype).itemsize
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=off).reshape(shape).copy()
            off += size
            return arr

        cols["ft"].append(take(n_frame, np.uint8, FRAME_SHAPE))
        cols["fp"].append(take(n_frame, np.uint8, FRAME_SHAPE))
        cols["ct"].append(take(5, "<f8", (5,)))
        cols["cp"].append(take(5, "<f8", (5,)))
        cols["at"].append(take(28, "<f8", (14, 2)))
        cols["ap"].append(take(28, "<f8", (14, 2)))
        cols["m"].append(take(32, np.uint8, (4, 8)).astype(bool))
    if len(meta) != header.get("count", len(meta)):
        raise ContractError(f"{path}: header says {header.get('count')} records, found {len(meta)}")
    return Dataset(np.stack(cols["ft"]), np.stack(cols["fp"]), np.stack(cols["ct"]), np.stack(cols["cp"]),
                   np.stack(cols["at"]), np.stack(cols["ap"]), np.stack(cols["m"]), meta,
                   int(header["delta_ticks"]), header)
