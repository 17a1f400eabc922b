"""Adam training with cosine warm restarts for every model wiring."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor as T
from ..errors import ConfigError, NumericError
from ..losses import LossWeights, action_loss, forecast_loss, mask_loss
from ..models import DrivingModel, ModelConfig, TokenGrid, check_mode
from ..tensor import GradTape, Tensor, stop_grad
from .buckets import WeightedSampler
from .data import Dataset

log = logging.getLogger(__name__)

BASE_LR = 3e-5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    steps_per_epoch: int = 25
    batch_size: int = 32
    lr: float = BASE_LR
    restarts: int = 4
    restart_decay: float = 0.8
    min_lr: float = 0.0
    seed: int = 0
    lambda_mask: float = 1.0 / 16.0
    lambda_forecast: float = 0.5
    weighted: bool = True
    detach_forecast: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.restarts < 0:
            raise ConfigError("restarts must be >= 0")
        if self.total_steps < self.restarts + 1:
            raise ConfigError(f"{self.total_steps} steps cannot hold {self.restarts + 1} cosine segments")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_mask, self.lambda_forecast)


def lr_schedule(cfg: TrainConfig) -> np.ndarray:
    """Per-step LR: ``restarts + 1`` equal cosine segments, each peak scaled by
    ``restart_decay`` relative to the previous one."""
    n = cfg.total_steps
    bounds = np.linspace(0, n, cfg.restarts + 2).round().astype(int)
    out = np.empty(n)
    for j in range(cfg.restarts + 1):
        a, b = bounds[j], bounds[j + 1]
        peak = cfg.lr * cfg.restart_decay ** j
        i = np.arange(b - a)
        out[a:b] = cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1 + np.cos(np.pi * i / (b - a)))
    return out


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(NumericError):
    def __init__(self, step: int, components: dict[str, float], cause: str = ""):
        super().__init__(f"non-finite loss at step {step}: {components} {cause}".strip())
        self.step = step
        self.components = components


@dataclass
class StepLoss:
    step: int
    lr: float
    total: float
    action: float
    mask: float
    forecast: float


def compute_losses(model: DrivingModel, batch: dict[str, np.ndarray], cfg: TrainConfig) -> dict[str, Tensor]:
    """Forward the mode's training graph; returns the component and total losses."""
    mode = model.mode
    w = cfg.weights
    needs = model.needs()
    large_now = model.encode_large(batch["frame_t"]) if needs["large_now"] else None
    large_prev = model.encode_large(batch["frame_prev"]).pooled if needs["large_prev"] else None
    small = model.encode_small(batch["frame_t"]) if needs["small"] else None
    out = model.act(large_prev=large_prev, action_prev=batch["act_prev"], cond_prev=batch["cond_prev"],
                    small=small, large_now=large_now, cond_now=batch["cond_t"])
    comp: dict[str, Tensor] = {"action": action_loss(out.residuals, batch["act_t"])}
    total = comp["action"]
    use_mask = out.mask is not None and mode != "no_mask" and w.lambda_mask > 0
    if use_mask:
        if mode != "base" and out.mask.source != "small":
            raise ConfigError(f"{mode}: mask logits must come from the small encoder")
        comp["mask"] = mask_loss(out.mask, batch["mask"])
        total = total + w.lambda_mask * comp["mask"]
    if out.forecast is not None and not cfg.detach_forecast:
        with T.no_grad():
            gt = model.encode_large(batch["frame_t"]).pooled.tokens
        comp["forecast"] = forecast_loss(TokenGrid(stop_grad(gt), "large"), out.forecast)
        total = total + w.lambda_forecast * comp["forecast"]
    comp["total"] = total
    return comp


def _floats(comp: dict[str, Tensor]) -> dict[str, float]:
    return {k: float(v.data) for k, v in comp.items()}


@dataclass
class TrainResult:
    model: DrivingModel
    losses: list[StepLoss]
    config: TrainConfig
    seconds: float

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.losses])

    def write_losses(self, path: str | Path, header: dict | None = None) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"header": header or {}, "config": asdict(self.config)}) + "\n")
            for r in self.losses:
                fh.write(json.dumps(asdict(r)) + "\n")


def train(dataset: Dataset, mode: str, cfg: TrainConfig = TrainConfig(),
          model_cfg: ModelConfig | None = None, init: DrivingModel | None = None,
          indices: np.ndarray | None = None,
          on_step: Callable[[StepLoss], None] | None = None) -> TrainResult:
    """Train a fresh model of ``mode`` (or continue ``init``) on ``dataset``.

    ``indices`` restricts training to a subset. Batches come from the bucket
    sampler when ``cfg.weighted`` and uniformly otherwise; both are seeded.
    """
    check_mode(mode)
    if mode == "gt_forecast_test_only":
        raise ConfigError("gt_forecast_test_only runs with full-mode weights; train 'full'")
    model = init or DrivingModel(mode, model_cfg, seed=cfg.seed)
    if model.mode != mode:
        raise ConfigError(f"initial model is {model.mode!r}, asked to train {mode!r}")
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=int)
    rng = np.random.default_rng(cfg.seed + 7919)
    sampler = WeightedSampler([dataset.meta[i] for i in pool], seed=cfg.seed) if cfg.weighted else None
    params = model.params()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    lrs = lr_schedule(cfg)
    records: list[StepLoss] = []
    t0 = time.perf_counter()
    for step, lr in enumerate(lrs):
        pick = sampler.sample(cfg.batch_size) if sampler else rng.integers(len(pool), size=cfg.batch_size)
        batch = dataset.batch(pool[pick])
        try:
            with GradTape() as tape:
                comp = compute_losses(model, batch, cfg)
            vals = _floats(comp)
            if not all(math.isfinite(v) for v in vals.values()):
                raise TrainingDiverged(step, vals)
            grads = tape.backward(comp["total"])
        except TrainingDiverged:
            raise
        except NumericError as exc:
            raise TrainingDiverged(step, {}, str(exc)) from exc
        opt.step(grads, float(lr))
        rec = StepLoss(step, float(lr), vals["total"], vals["action"], vals.get("mask", 0.0),
                       vals.get("forecast", 0.0))
        records.append(rec)
        if on_step:
            on_step(rec)
    return TrainResult(model, records, cfg, time.perf_counter() - t0)


def save_checkpoint(path: str | Path, model: DrivingModel) -> None:
    T.save_params(path, model.params())


def load_checkpoint(path: str | Path, mode: str, model_cfg: ModelConfig | None = None) -> DrivingModel:
    model = DrivingModel(mode, model_cfg, seed=0)
    model.load_arrays(T.load_params(path))
    return model
