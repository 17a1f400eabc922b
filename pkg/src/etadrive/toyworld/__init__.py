"""Deterministic 2D driving world with a pinhole renderer and a scripted expert."""

from .camera import (FRAME_CHANNELS, FRAME_H, FRAME_W, MASK_COLS, MASK_ROWS, PATCH,
                     CameraModel, action_to_mask, frame_to_text, project_point,
                     render_observation)
from .core import (DELTA, DT, NPC, NPCScript, Pose, Road, Route, TrafficLight,
                   WorldState, conditioning, step_world, target_waypoints, to_ego,
                   to_world, tracker_command)
from .episode import Rollout, log_record, read_log, replay, run_episode, write_log
from .expert import expert_policy
from .scenarios import (SCENARIO_KINDS, Episode, delta_ticks, hard_brake_gap,
                        make_scenario, scenario_suite, with_goal)

__all__ = [
    "FRAME_CHANNELS", "FRAME_H", "FRAME_W", "MASK_COLS", "MASK_ROWS", "PATCH",
    "CameraModel", "action_to_mask", "frame_to_text", "project_point", "render_observation",
    "DELTA", "DT", "NPC", "NPCScript", "Pose", "Road", "Route", "TrafficLight", "WorldState",
    "conditioning", "step_world", "target_waypoints", "to_ego", "to_world", "tracker_command",
    "Rollout", "log_record", "read_log", "replay", "run_episode", "write_log",
    "expert_policy", "SCENARIO_KINDS", "Episode", "delta_ticks", "hard_brake_gap",
    "make_scenario", "scenario_suite", "with_goal",
]
