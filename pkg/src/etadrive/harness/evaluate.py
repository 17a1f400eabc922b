"""Closed-loop evaluation and the ablation table."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from ..models import DrivingModel, check_mode, train_kind
from ..scheduler import CostModel, Infeasible, PipelineConfig, plan_schedule, run_pipeline
from ..toyworld import CameraModel, Episode, WorldState, run_episode
from ..toyworld.episode import Rollout
from ..plan import ActionPlan

ABLATION_ROWS = (
    ("base", "base"),
    ("full", "full"),
    ("A", "no_forecast"),
    ("B", "no_small"),
    ("C", "no_mask"),
    ("D", "small_only"),
    ("E", "gt_forecast"),
    ("F", "gt_forecast_test_only"),
)


def eval_pipeline_config(delta_ms: float = 500.0) -> PipelineConfig:
    """Closed-loop evaluation runs at the world tick (100 ms)."""
    return PipelineConfig(tick_ms=100.0, delta_ms=delta_ms)


def route_completion(rollout: Rollout) -> float:
    """Percentage of the start-to-goal distance covered along x, in [0, 100]."""
    start = rollout.states[0].ego.x
    goal = rollout.states[0].goal_x
    best = max(s.ego.x for s in rollout.states)
    if rollout.final.route_completed:
        return 100.0
    return float(np.clip((best - start) / (goal - start), 0.0, 1.0) * 100.0)


@dataclass
class EpisodeMetrics:
    episode: str
    kind: str
    seed: int
    mode: str
    success: bool
    collision: bool
    off_road: bool
    ran_red_light: bool
    completion: float
    latency_ms: float
    stale_misses: int
    budget_misses: int
    ticks: int
    failure_tick: int | None

    @classmethod
    def from_rollout(cls, rollout: Rollout, seed: int, mode: str, latency_ms: float = 0.0,
                     stale: int = 0, budget: int = 0) -> "EpisodeMetrics":
        f = rollout.final
        return cls(rollout.episode.episode_id, rollout.episode.kind, seed, mode,
                   bool(rollout.success and stale == 0), f.collision, f.off_road, f.ran_red_light,
                   route_completion(rollout), latency_ms, stale, budget, len(rollout.actions),
                   rollout.failure_tick())


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


@dataclass
class EvalReport:
    mode: str
    episodes: list[EpisodeMetrics]

    @property
    def seeds(self) -> list[int]:
        return sorted({e.seed for e in self.episodes})

    @property
    def kinds(self) -> list[str]:
        return sorted({e.kind for e in self.episodes})

    def _per_seed(self, fn: Callable[[list[EpisodeMetrics]], float], kind: str | None = None) -> list[float]:
        out = []
        for s in self.seeds:
            rows = [e for e in self.episodes if e.seed == s and (kind is None or e.kind == kind)]
            out.append(fn(rows))
        return out

    def success_rates(self, kind: str | None = None) -> list[float]:
        return self._per_seed(lambda r: 100.0 * np.mean([e.success for e in r]), kind)

    def sr(self, kind: str | None = None) -> tuple[float, float]:
        return _mean_std(self.success_rates(kind))

    def collision_rate(self) -> tuple[float, float]:
        return _mean_std(self._per_seed(lambda r: 100.0 * np.mean([e.collision for e in r])))

    def completion(self) -> tuple[float, float]:
        return _mean_std(self._per_seed(lambda r: float(np.mean([e.completion for e in r]))))

    @property
    def latency_ms(self) -> float:
        return float(np.mean([e.latency_ms for e in self.episodes]))

    @property
    def stale_misses(self) -> int:
        return sum(e.stale_misses for e in self.episodes)

    def summary(self) -> dict:
        sr, sd = self.sr()
        col, cold = self.collision_rate()
        comp, compd = self.completion()
        return {"mode": self.mode, "seeds": self.seeds, "sr": sr, "sr_std": sd, "collision": col,
                "collision_std": cold, "completion": comp, "completion_std": compd,
                "latency_ms": self.latency_ms, "stale_misses": self.stale_misses,
                "per_kind": {k: dict(zip(("sr", "sr_std"), self.sr(k))) for k in self.kinds}}

    def to_text(self) -> str:
        s = self.summary()
        lines = [f"mode {self.mode}  seeds {','.join(map(str, s['seeds']))}",
                 f"  success rate     {s['sr']:6.2f} +- {s['sr_std']:.2f} %",
                 f"  collision rate   {s['collision']:6.2f} +- {s['collision_std']:.2f} %",
                 f"  route completion {s['completion']:6.2f} +- {s['completion_std']:.2f} %",
                 f"  reactive latency {s['latency_ms']:6.1f} ms (simulated)",
                 f"  stale misses     {s['stale_misses']}"]
        for k, v in s["per_kind"].items():
            lines.append(f"  {k:<12} SR {v['sr']:6.2f} +- {v['sr_std']:.2f}")
        return "\n".join(lines)

    def write_jsonl(self, path: str | Path, header: dict | None = None) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": header or {}, "summary": self.summary()}) + "\n")
            for e in self.episodes:
                fh.write(json.dumps(asdict(e)) + "\n")


def evaluate_policy(policy: Callable[[WorldState], ActionPlan], episodes: Sequence[Episode],
                    name: str = "expert") -> EvalReport:
    """Direct closed loop for a privileged policy (no perception, no schedule)."""
    rows = [EpisodeMetrics.from_rollout(run_episode(ep, policy), 0, name) for ep in episodes]
    return EvalReport(name, rows)


def evaluate_closed_loop(models: Mapping[int, DrivingModel], mode: str, episodes: Sequence[Episode],
                         costs: CostModel | None = None, pcfg: PipelineConfig | None = None,
                         cam: CameraModel | None = None,
                         on_episode: Callable[[EpisodeMetrics], None] | None = None) -> EvalReport:
    """Run every episode through the pipeline once per seeded model.

    ``models`` maps training seed to model. The schedule is checked before
    anything runs; results are ordered by (seed, episode).
    """
    mode = check_mode(mode)
    costs = costs or CostModel()
    pcfg = pcfg or eval_pipeline_config()
    cam = cam or CameraModel()
    plan = plan_schedule(costs, pcfg, mode, enforce_reactive=False)
    if isinstance(plan, Infeasible):
        raise ContractError(f"infeasible schedule for {mode}: {plan.inequality}; fix: {plan.fix}")
    rows = []
    for seed in sorted(models):
        model = models[seed]
        if train_kind(mode) != model.mode:
            raise ConfigError(f"mode {mode} needs a {train_kind(mode)!r} model, got {model.mode!r}")
        for ep in episodes:
            res = run_pipeline(ep, model, costs, pcfg, mode=mode, cam=cam)
            m = EpisodeMetrics.from_rollout(res.rollout, seed, mode, res.latency_ms,
                                            res.stale_misses, res.budget_misses)
            rows.append(m)
            if on_episode:
                on_episode(m)
    rows.sort(key=lambda e: (e.seed, e.episode))
    return EvalReport(mode, rows)


@dataclass
class AblationTable:
    rows: list[tuple[str, EvalReport]] = field(default_factory=list)

    def to_text(self) -> str:
        kinds = sorted({k for _, r in self.rows for k in r.kinds})
        head = f"{'row':<5}{'mode':<23}{'SR':>15}{'latency':>9}  " + "  ".join(f"{k[:10]:>10}" for k in kinds)
        lines = [head, "-" * len(head)]
        for label, rep in self.rows:
            sr, sd = rep.sr()
            per = "  ".join(f"{rep.sr(k)[0]:>10.1f}" if k in rep.kinds else f"{'-':>10}" for k in kinds)
            lines.append(f"{label:<5}{rep.mode:<23}{sr:>8.2f}+-{sd:<5.2f}{rep.latency_ms:>9.0f}  {per}")
        return "\n".join(lines)

    def as_records(self) -> list[dict]:
        return [dict(row=label, **rep.summary()) for label, rep in self.rows]


def run_ablation_matrix(models: Mapping[str, Mapping[int, DrivingModel]], episodes: Sequence[Episode],
                        costs: CostModel | None = None, pcfg: PipelineConfig | None = None,
                        cam: CameraModel | None = None, rows=ABLATION_ROWS,
                        on_episode: Callable[[EpisodeMetrics], None] | None = None) -> AblationTable:
    """Evaluate every ablation row. ``models`` is keyed by trained mode, then seed;
    row F reuses the full-mode models."""
    missing = sorted({train_kind(m) for _, m in rows} - {k for k, v in models.items() if v})
    if missing:
        raise ConfigError(f"missing checkpoints; train these modes first: {', '.join(missing)}")
    table = AblationTable()
    for label, mode in rows:
        table.rows.append((label, evaluate_closed_loop(models[train_kind(mode)], mode, episodes,
                                                       costs, pcfg, cam, on_episode)))
    return table
