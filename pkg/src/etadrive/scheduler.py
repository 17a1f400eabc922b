"""Asynchronous dual-rate runtime.

The heavy worker encodes buffered past frames with the large encoder in
batches; the reactive path runs the small encoder, forecaster and action
model on every tick and consumes the heavy result for the frame exactly
``delta`` older. Latency lives on a simulated clock driven by
:class:`CostModel`; numerics are real and independent of the timing.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .models import DrivingModel, EncoderOutput, check_mode
from .plan import ActionPlan, reconstruct_action
from .toyworld import (CameraModel, Episode, WorldState, conditioning, render_observation,
                       step_world)
from .toyworld.core import DT
from .toyworld.episode import Rollout

EVENT_KINDS = ("frame_in", "batch_start", "batch_end", "fuse", "act_out", "deadline_miss")
ASYNC_MODES = ("full", "no_mask", "no_forecast", "no_small")
SYNC_MODES = ("base", "gt_forecast", "gt_forecast_test_only")


@dataclass(frozen=True)
class CostModel:
    """Simulated costs in milliseconds.

    ``large_sync`` is the large encoder on the current frame inside the
    reactive path; ``sync_join`` is the extra cost of joining a synchronous
    large result with the small branch.
    """

    large_fixed: float = 30.0
    large_marginal: float = 24.0
    small: float = 19.0
    forecast: float = 19.0
    action: float = 12.0
    large_sync: float = 90.0
    sync_join: float = 3.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"cost {k} must be finite and non-negative, got {v}")

    def cost_large(self, batch: int) -> float:
        if batch < 1:
            raise ConfigError("batch size must be >= 1")
        return self.large_fixed + self.large_marginal * batch

    def reactive_cost(self, mode: str) -> float:
        """Per-tick critical path of ``mode``."""
        mode = check_mode(mode)
        if mode == "base":
            return self.large_sync + self.action
        if mode in ("full", "no_mask"):
            return self.small + self.forecast + self.action
        if mode in ("no_forecast", "small_only"):
            return self.small + self.action
        if mode == "no_small":
            return self.forecast + self.action
        return self.large_sync + self.small + self.action + self.sync_join


@dataclass(frozen=True)
class PipelineConfig:
    tick_ms: float = 50.0
    delta_ms: float = 500.0
    batch_size: int | None = None      # None: smallest feasible
    capacity: int = 16

    def __post_init__(self):
        if self.tick_ms <= 0 or self.delta_ms <= 0:
            raise ConfigError("tick and delta must be positive")
        ratio = self.delta_ms / self.tick_ms
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(f"delta {self.delta_ms} ms is not a multiple of tick {self.tick_ms} ms")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")

    @property
    def delta_ticks(self) -> int:
        return int(round(self.delta_ms / self.tick_ms))


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    cost_large: float
    worst_wait: float
    reactive_cost: float
    mode: str
    tick_ms: float
    delta_ms: float
    feasible: bool = True

    def timeline(self, n_ticks: int) -> list[tuple[int, float, float]]:
        """(batch index, start, end) of the first batches when frames arrive every tick."""
        out, free = [], 0.0
        for j in range(n_ticks // self.batch_size):
            ready = ((j + 1) * self.batch_size - 1) * self.tick_ms
            start = max(ready, free)
            free = start + self.cost_large
            out.append((j, start, free))
        return out


@dataclass(frozen=True)
class Infeasible:
    binding: str                 # 'throughput' or 'staleness'
    inequality: str
    fix: str
    mode: str
    feasible: bool = False


def _batch_checks(costs: CostModel, cfg: PipelineConfig, b: int) -> tuple[bool, bool]:
    c = costs.cost_large(b)
    return c <= b * cfg.tick_ms + 1e-9, (b - 1) * cfg.tick_ms + c <= cfg.delta_ms + 1e-9


def plan_schedule(costs: CostModel, cfg: PipelineConfig, mode: str = "full",
                  enforce_reactive: bool = True) -> BatchPlan | Infeasible:
    """Smallest batch size meeting throughput and staleness for ``mode``.

    Throughput: cost_large(B) <= B*T. Staleness: (B-1)*T + cost_large(B) <= Delta.
    Modes that encode the current frame synchronously need no heavy worker
    but must fit their reactive path in one tick when ``enforce_reactive``.
    """
    mode = check_mode(mode)
    T_, D_ = cfg.tick_ms, cfg.delta_ms
    reactive = costs.reactive_cost(mode)
    c1 = costs.cost_large(1)
    # no waiting or batching can bring the large result in under delta
    if mode in ASYNC_MODES and c1 > D_ + 1e-9:
        return Infeasible("staleness", f"cost_large(1) = {c1:g} ms > delta {D_:g} ms",
                          f"delta >= {math.ceil(c1 / T_) * T_:g} ms", mode)
    if enforce_reactive and reactive > T_ + 1e-9:
        return Infeasible("throughput", f"reactive path {reactive:g} ms > tick {T_:g} ms",
                          f"tick period >= {reactive:g} ms", mode)
    if mode not in ASYNC_MODES:
        return BatchPlan(1, 0.0, 0.0, reactive, mode, T_, D_)
    sizes = [cfg.batch_size] if cfg.batch_size is not None else range(1, cfg.capacity + 1)
    thr_ok = []
    for b in sizes:
        thr, stale = _batch_checks(costs, cfg, b)
        if thr and stale:
            return BatchPlan(b, costs.cost_large(b), (b - 1) * T_, reactive, mode, T_, D_)
        if thr:
            thr_ok.append(b)
    if not thr_ok:
        bmax = max(sizes)
        need = costs.cost_large(bmax) / bmax
        return Infeasible("throughput",
                          f"cost_large(B) > B*T for every B <= {bmax} (best {costs.cost_large(bmax):g} > {bmax * T_:g})",
                          f"tick period >= {need:g} ms", mode)
    need = min((b - 1) * T_ + costs.cost_large(b) for b in thr_ok)
    return Infeasible("staleness",
                      f"(B-1)*T + cost_large(B) > delta for every throughput-feasible B {thr_ok}",
                      f"delta >= {math.ceil(need / T_ - 1e-9) * T_:g} ms", mode)


# ---------------------------------------------------------------------------
# trace


@dataclass
class ScheduleTrace:
    events: list[dict] = field(default_factory=list)
    _seq: int = 0

    def add(self, t: float, kind: str, **kw) -> None:
        if kind not in EVENT_KINDS and kind != "bootstrap":
            raise ContractError(f"unknown trace event {kind!r}")
        self.events.append({"sim_time": float(t), "kind": kind, "seq": self._seq, **kw})
        self._seq += 1

    def ordered(self) -> list[dict]:
        return sorted(self.events, key=lambda e: (e["sim_time"], e["seq"]))

    def of(self, kind: str) -> list[dict]:
        return [e for e in self.ordered() if e["kind"] == kind]

    def write_jsonl(self, path: str | Path, header: dict | None = None) -> None:
        with open(path, "w") as fh:
            if header is not None:
                fh.write(json.dumps({"header": header}) + "\n")
            for e in self.ordered():
                fh.write(json.dumps(e) + "\n")

    def summary(self, tick_ms: float, horizon_ms: float | None = None) -> dict:
        misses = self.of("deadline_miss")
        fuses = self.of("fuse")
        stal = Counter(round(e["staleness_ms"], 6) for e in fuses if e.get("staleness_ms") is not None)
        busy = sum(e["sim_time"] - s["sim_time"] for s, e in zip(self.of("batch_start"), self.of("batch_end")))
        if horizon_ms is None:
            horizon_ms = max((e["sim_time"] for e in self.events), default=0.0)
        return {
            "ticks": len(self.of("frame_in")),
            "batches": len(self.of("batch_start")),
            "deadline_misses": len(misses),
            "misses_by_reason": dict(Counter(e["reason"] for e in misses)),
            "staleness_hist_ms": {str(k): v for k, v in sorted(stal.items())},
            "worker_utilization": busy / horizon_ms if horizon_ms > 0 else 0.0,
        }


class HeavyWorkerClock:
    """Simulated-time model of the batching heavy worker: waits for B frames,
    then runs one batch as soon as it is free."""

    def __init__(self, costs: CostModel, batch_size: int, trace: ScheduleTrace):
        self._costs = costs
        self._b = batch_size
        self._trace = trace
        self._buffer: list[int] = []
        self._free = -math.inf
        self._batch = 0
        self.done_at: dict[int, float] = {}

    def enqueue(self, fid: int, t: float) -> list[int] | None:
        self._buffer.append(fid)
        if len(self._buffer) < self._b:
            return None
        return self._launch(t)

    def flush(self, t: float) -> list[int] | None:
        return self._launch(t) if self._buffer else None

    def _launch(self, t: float) -> list[int]:
        frames, self._buffer = self._buffer, []
        start = max(t, self._free)
        end = start + self._costs.cost_large(len(frames))
        self._trace.add(start, "batch_start", frames=frames, batch=self._batch)
        self._trace.add(end, "batch_end", frames=frames, batch=self._batch)
        for f in frames:
            self.done_at[f] = end
        self._free = end
        self._batch += 1
        return frames


def simulate_schedule(costs: CostModel, cfg: PipelineConfig, n_ticks: int,
                      mode: str = "full") -> tuple[ScheduleTrace, BatchPlan | Infeasible]:
    """Timing-only pipeline run (no models) used by the bench and invariants."""
    mode = check_mode(mode)
    plan = plan_schedule(costs, cfg, mode, enforce_reactive=False)
    trace = ScheduleTrace()
    d = cfg.delta_ticks
    b = plan.batch_size if isinstance(plan, BatchPlan) else (cfg.batch_size or 1)
    worker = HeavyWorkerClock(costs, b, trace) if mode in ASYNC_MODES else None
    reactive = costs.reactive_cost(mode)
    for k in range(n_ticks):
        t = k * cfg.tick_ms
        trace.add(t, "frame_in", frames=[k], tick=k)
        if worker is not None:
            worker.enqueue(k, t)
        _reactive_tick(trace, worker, k, t, d, cfg.tick_ms, reactive)
    if worker is not None:
        worker.flush(n_ticks * cfg.tick_ms)
    return trace, plan


def _reactive_tick(trace, worker, k, t, d, tick_ms, reactive) -> str | None:
    """Record fuse / act_out / misses for tick ``k``; returns the miss reason."""
    reason = None
    if worker is not None:
        src = k - d
        if src >= 0:
            done = worker.done_at.get(src)
            if done is None or done > t + 1e-9:
                reason = "stale"
                trace.add(t, "deadline_miss", tick=k, frames=[src], reason="stale")
            trace.add(t, "fuse", tick=k, frames=[src], staleness_ms=(k - src) * tick_ms,
                      warmup=False)
        else:
            trace.add(t, "fuse", tick=k, frames=[0], staleness_ms=None, warmup=True)
    else:
        trace.add(t, "fuse", tick=k, frames=[k], staleness_ms=0.0, warmup=False)
    if reactive > tick_ms + 1e-9:
        trace.add(t + tick_ms, "deadline_miss", tick=k, frames=[k], reason="budget")
        reason = reason or "budget"
    trace.add(t + reactive, "act_out", tick=k)
    return reason


# ---------------------------------------------------------------------------
# closed-loop runs


@dataclass
class PipelineResult:
    rollout: Rollout
    trace: ScheduleTrace
    plan: BatchPlan
    latency_ms: float
    stale_misses: int
    budget_misses: int
    wall_ms_per_tick: float = 0.0

    @property
    def actions(self) -> list[ActionPlan]:
        return self.rollout.actions


class _TickInputs:
    """Per-episode cache of rendered frames, conditioning and emitted actions."""

    def __init__(self, cam: CameraModel):
        self.cam = cam
        self.frames: list[np.ndarray] = []
        self.conds: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []

    def observe(self, state: WorldState) -> None:
        self.frames.append(render_observation(state, self.cam)[None])
        self.conds.append(conditioning(state)[None])


def _reactive_step(model: DrivingModel, wiring: str, k: int, d: int, io: _TickInputs,
                   large_prev: EncoderOutput | None, bootstrap: EncoderOutput | None) -> np.ndarray:
    """Reactive computation of tick ``k``: forecast from the stale frame, then fuse.

    Shared verbatim by the scheduled pipeline and the sequential oracle so the
    two can only differ through which large result they are handed.
    """
    need = model.needs(wiring)
    with T.no_grad():
        small = model.encode_small(io.frames[k]) if need["small"] else None
        large_now = model.encode_large(io.frames[k]) if need["large_now"] else None
        if need["large_prev"]:
            if k >= d:
                prev, a_prev, c_prev = large_prev, io.actions[k - d], io.conds[k - d]
            else:
                prev, a_prev, c_prev = bootstrap, np.zeros((1, 14, 2)), io.conds[0]
            out = model.act(large_prev=prev.pooled, action_prev=a_prev, cond_prev=c_prev,
                            small=small, large_now=None, cond_now=io.conds[k], wiring=wiring)
        else:
            out = model.act(large_prev=None, action_prev=None, cond_prev=None, small=small,
                            large_now=large_now, cond_now=io.conds[k], wiring=wiring)
    return out.residuals.data[0].copy()


def _eval_wiring(model: DrivingModel, mode: str | None) -> str:
    wiring = check_mode(mode or model.mode)
    if wiring == "gt_forecast_test_only" and model.large is None:
        raise ConfigError("gt_forecast_test_only needs a model with a large encoder")
    return wiring


def run_pipeline(episode: Episode, model: DrivingModel, costs: CostModel, cfg: PipelineConfig,
                 mode: str | None = None, cam: CameraModel | None = None,
                 max_ticks: int | None = None, enforce_reactive: bool = False) -> PipelineResult:
    """Closed-loop episode through the asynchronous runtime in simulated time.

    The world runs in lock-step with the reactive path (the simulator waits
    for each action), so reactive over-budget ticks are recorded as
    ``budget`` misses but do not change the outcome. A missing heavy result
    is a ``stale`` miss and fails the episode.
    """
    wiring = _eval_wiring(model, mode)
    cam = cam or CameraModel()
    plan = plan_schedule(costs, cfg, wiring, enforce_reactive=enforce_reactive)
    if isinstance(plan, Infeasible):
        raise ContractError(f"infeasible schedule for {wiring}: {plan.inequality}; fix: {plan.fix}")
    if abs(cfg.tick_ms - DT * 1000) > 1e-9:
        raise ConfigError(f"closed-loop tick must equal the world tick ({DT * 1000:g} ms)")
    d = cfg.delta_ticks
    n = episode.max_ticks if max_ticks is None else max_ticks
    trace = ScheduleTrace()
    is_async = wiring in ASYNC_MODES
    worker = HeavyWorkerClock(costs, plan.batch_size, trace) if is_async else None
    reactive = costs.reactive_cost(wiring)
    io = _TickInputs(cam)
    results: dict[int, EncoderOutput] = {}
    state = episode.initial
    states, actions = [state], []
    stale = budget = 0
    bootstrap = None
    wall0 = time.perf_counter()
    for k in range(n):
        if state.terminal:
            break
        t = k * cfg.tick_ms
        io.observe(state)
        if is_async and k == 0:
            # pre-roll: frame 0 encoded before the clock starts
            with T.no_grad():
                bootstrap = model.encode_large(io.frames[0])
            trace.add(t, "bootstrap", frames=[0])
        trace.add(t, "frame_in", frames=[k], tick=k)
        if worker is not None:
            launched = worker.enqueue(k, t)
            if launched:
                with T.no_grad():
                    for f in launched:
                        results[f] = model.encode_large(io.frames[f])
        reason = _reactive_tick(trace, worker, k, t, d, cfg.tick_ms, reactive)
        if reason == "stale":
            stale += 1
        elif reason == "budget":
            budget += 1
        src = k - d
        large_prev = results.get(src) if (is_async and src >= 0) else None
        if is_async and src >= 0 and large_prev is None:
            # the slot is empty: degrade to the newest finished result, already logged as a miss
            ready = [f for f in results if f <= src]
            large_prev = results[max(ready)] if ready else bootstrap
        res = _reactive_step(model, wiring, k, d, io, large_prev, bootstrap)
        io.actions.append(res[None])
        action = reconstruct_action(res)
        actions.append(action)
        state = step_world(state, action, DT)
        states.append(state)
    if worker is not None:
        worker.flush(len(actions) * cfg.tick_ms)
    wall = (time.perf_counter() - wall0) * 1000 / max(1, len(actions))
    rollout = Rollout(episode, states, actions)
    return PipelineResult(rollout, trace, plan, reactive, stale, budget, wall)


def offline_oracle(episode: Episode, model: DrivingModel, delta_ticks: int, mode: str | None = None,
                   cam: CameraModel | None = None, max_ticks: int | None = None) -> list[ActionPlan]:
    """Sequential reference: at each tick encode frame t-Delta afresh, forecast,
    encode the current frame and fuse. No queue, no clock."""
    wiring = _eval_wiring(model, mode)
    cam = cam or CameraModel()
    io = _TickInputs(cam)
    need = model.needs(wiring)
    state = episode.initial
    n = episode.max_ticks if max_ticks is None else max_ticks
    out: list[ActionPlan] = []
    bootstrap = None
    for k in range(n):
        if state.terminal:
            break
        io.observe(state)
        large_prev = None
        if need["large_prev"]:
            with T.no_grad():
                if k == 0:
                    bootstrap = model.encode_large(io.frames[0])
                if k >= delta_ticks:
                    large_prev = model.encode_large(io.frames[k - delta_ticks])
        res = _reactive_step(model, wiring, k, delta_ticks, io, large_prev, bootstrap)
        io.actions.append(res[None])
        action = reconstruct_action(res)
        out.append(action)
        state = step_world(state, action, DT)
    return out


def run_pipeline_threaded(episode: Episode, model: DrivingModel, costs: CostModel,
                          cfg: PipelineConfig, mode: str | None = None,
                          cam: CameraModel | None = None, max_ticks: int | None = None
                          ) -> tuple[list[ActionPlan], dict]:
    """The same runtime with the heavy worker on a real thread.

    The reactive loop only reads finished results; since the simulated world
    waits for each action, a tick whose heavy result is still in flight
    blocks on it and the wall-clock wait is reported.
    """
    wiring = _eval_wiring(model, mode)
    if wiring not in ASYNC_MODES:
        raise ConfigError(f"threaded runtime needs an asynchronous mode, got {wiring!r}")
    plan = plan_schedule(costs, cfg, wiring, enforce_reactive=False)
    if isinstance(plan, Infeasible):
        raise ContractError(f"infeasible schedule: {plan.inequality}")
    cam = cam or CameraModel()
    d = cfg.delta_ticks
    b = plan.batch_size
    q: queue.Queue = queue.Queue(maxsize=cfg.capacity)
    results: dict[int, EncoderOutput] = {}
    cond = threading.Condition()
    processed: list[int] = []

    def heavy():
        pending: list[tuple[int, np.ndarray]] = []
        while True:
            item = q.get()
            if item is not None:
                pending.append(item)
            if pending and (item is None or len(pending) >= b):
                feats = {}
                with T.no_grad():
                    for fid, frame in pending:
                        feats[fid] = model.encode_large(frame)
                with cond:
                    results.update(feats)
                    processed.extend(f for f, _ in pending)
                    cond.notify_all()
                pending = []
            if item is None:
                return

    worker = threading.Thread(target=heavy, daemon=True)
    worker.start()
    io = _TickInputs(cam)
    state = episode.initial
    n = episode.max_ticks if max_ticks is None else max_ticks
    actions: list[ActionPlan] = []
    waited = 0.0
    bootstrap = None
    try:
        for k in range(n):
            if state.terminal:
                break
            io.observe(state)
            if k == 0:
                with T.no_grad():
                    bootstrap = model.encode_large(io.frames[0])
            q.put((k, io.frames[k]))
            large_prev = None
            if k >= d:
                w0 = time.perf_counter()
                with cond:
                    cond.wait_for(lambda: k - d in results)
                    large_prev = results[k - d]
                waited += time.perf_counter() - w0
            res = _reactive_step(model, wiring, k, d, io, large_prev, bootstrap)
            io.actions.append(res[None])
            action = reconstruct_action(res)
            actions.append(action)
            state = step_world(state, action, DT)
    finally:
        q.put(None)
        worker.join()
    return actions, {"wait_s": waited, "processed": sorted(processed), "batch_size": b}


def gantt(trace: ScheduleTrace, tick_ms: float, n_ticks: int = 24, width: int = 96) -> str:
    """Text timeline: one row for the heavy worker, one for the reactive path."""
    horizon = n_ticks * tick_ms
    scale = width / horizon
    heavy = [" "] * width
    react = [" "] * width
    ticks = [" "] * width
    for e in trace.ordered():
        if e["sim_time"] > horizon:
            continue
        if e["kind"] == "batch_start":
            ends = [x for x in trace.of("batch_end") if x["batch"] == e["batch"]]
            end = ends[0]["sim_time"] if ends else e["sim_time"]
            a, z = int(e["sim_time"] * scale), min(width, max(int(end * scale), int(e["sim_time"] * scale) + 1))
            ch = str(e["batch"] % 10)
            for i in range(a, z):
                heavy[i] = ch
        elif e["kind"] == "frame_in":
            ticks[min(width - 1, int(e["sim_time"] * scale))] = "|"
        elif e["kind"] == "act_out":
            start = e["tick"] * tick_ms
            for i in range(int(start * scale), min(width, int(e["sim_time"] * scale))):
                react[i] = "=" if react[i] == " " else "#"
        elif e["kind"] == "deadline_miss":
            react[min(width - 1, int(e["sim_time"] * scale))] = "!"
    return "\n".join([
        "ticks   " + "".join(ticks),
        "heavy   " + "".join(heavy),
        "react   " + "".join(react),
        f"scale: {horizon:g} ms over {width} columns; digits = batch id, '=' reactive compute, '#' overlap, '!' miss",
    ])


def sweep(costs: CostModel, ticks_ms=(25, 50, 100), deltas_ms=(100, 200, 300, 400, 500, 600, 800, 1000),
          mode: str = "full") -> list[dict]:
    """Feasibility over a grid of tick periods and staleness values."""
    rows = []
    for t in ticks_ms:
        for dlt in deltas_ms:
            if abs(dlt / t - round(dlt / t)) > 1e-9:
                continue
            p = plan_schedule(costs, PipelineConfig(t, dlt), mode)
            rows.append({"tick_ms": t, "delta_ms": dlt, "feasible": p.feasible,
                         "batch": p.batch_size if p.feasible else None,
                         "binding": None if p.feasible else p.binding})
    return rows
