"""Closed-loop rollouts and line-delimited episode logs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ..plan import ActionPlan
from .core import DT, WorldState, step_world
from .scenarios import Episode

Policy = Callable[[WorldState], ActionPlan]


@dataclass
class Rollout:
    episode: Episode
    states: list[WorldState]
    actions: list[ActionPlan]
    extras: list[dict] = field(default_factory=list)

    @property
    def final(self) -> WorldState:
        return self.states[-1]

    @property
    def success(self) -> bool:
        return self.final.route_completed and not self.final.failed

    def failure_tick(self) -> int | None:
        for s in self.states:
            if s.failed:
                return s.tick
        return None

    def log_records(self) -> list[dict]:
        return [log_record(s, a, self.extras[i] if i < len(self.extras) else None)
                for i, (s, a) in enumerate(zip(self.states, self.actions))]


def log_record(state: WorldState, action: ActionPlan | None, extra: dict | None = None) -> dict:
    rec = {
        "tick": state.tick,
        "sim_time": state.sim_time,
        "ego": [state.ego.x, state.ego.y, state.ego.heading, state.ego.speed],
        "action": None if action is None else action.residuals().tolist(),
        "flags": state.flags(),
    }
    if extra:
        rec.update(extra)
    return rec


def run_episode(episode: Episode, policy: Policy, max_ticks: int | None = None,
                stop_on_terminal: bool = True) -> Rollout:
    """Drive ``policy`` from the episode's initial state.

    ``states[i]`` is the state observed at tick ``i`` and ``actions[i]`` the plan
    chosen there; the final state has no action.
    """
    n = episode.max_ticks if max_ticks is None else max_ticks
    state = episode.initial
    states, actions = [state], []
    for _ in range(n):
        if stop_on_terminal and state.terminal:
            break
        action = policy(state)
        actions.append(action)
        state = step_world(state, action, DT)
        states.append(state)
    return Rollout(episode, states, actions)


def write_log(path: str | Path, rollout: Rollout, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"header": header, "episode": rollout.episode.episode_id}) + "\n")
        for rec in rollout.log_records():
            fh.write(json.dumps(rec) + "\n")
        fh.write(json.dumps(log_record(rollout.final, None)) + "\n")


def read_log(path: str | Path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [json.loads(l) for l in fh if l.strip()]
    return lines[0], lines[1:]


def replay(episode: Episode, records: Iterable[dict]) -> list[WorldState]:
    """Re-simulate logged actions; returns the state sequence."""
    state = episode.initial
    out = [state]
    for rec in records:
        if rec.get("action") is None:
            break
        state = step_world(state, ActionPlan.from_residuals(np.asarray(rec["action"])), DT)
        out.append(state)
    return out
