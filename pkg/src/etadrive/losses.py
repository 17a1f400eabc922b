"""Imitation, mask and forecasting objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .models import MaskLogits, TokenGrid
from .tensor import Tensor, as_tensor

MASK_WEIGHT = 1.0 / 16.0
FORECAST_WEIGHT = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda_mask: float = MASK_WEIGHT
    lambda_forecast: float = FORECAST_WEIGHT

    def __post_init__(self):
        # zero is allowed: the no-mask ablation and the detached-forecast check use it
        if self.lambda_mask < 0 or self.lambda_forecast < 0:
            raise ConfigError("loss weights must be non-negative")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def action_loss(pred_residuals, expert_residuals) -> Tensor:
    """Mean absolute error over all residual components."""
    pred, expert = as_tensor(pred_residuals), as_tensor(expert_residuals)
    _same_shape(pred, expert, "action_loss")
    if pred.shape[-2:] != (14, 2):
        raise DimensionError(f"action_loss expects (..., 14, 2) residuals, got {pred.shape}")
    return T.mean(T.tabs(pred - expert))


def mask_loss(mask_logits, gt_mask) -> Tensor:
    """Mean binary cross-entropy with logits: softplus(x) - x*y."""
    x = mask_logits.logits if isinstance(mask_logits, MaskLogits) else as_tensor(mask_logits)
    y = np.asarray(gt_mask, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"mask_loss: logits {x.shape} vs mask {y.shape}")
    if x.shape[-2:] != (4, 8):
        raise DimensionError(f"mask_loss expects (..., 4, 8) grids, got {x.shape}")
    return T.mean(T.softplus(x) - x * Tensor(y))


def forecast_loss(gt_feat, pred_feat) -> Tensor:
    """Mean absolute error between stop-gradient target tokens and predictions."""
    gt = gt_feat.tokens if isinstance(gt_feat, TokenGrid) else gt_feat
    pred = pred_feat.tokens if isinstance(pred_feat, TokenGrid) else as_tensor(pred_feat)
    if not isinstance(gt, Tensor) or not gt.stopped:
        raise ContractError("forecast_loss target must be wrapped with stop_grad")
    _same_shape(gt, pred, "forecast_loss")
    return T.mean(T.tabs(pred - gt))


def total_base(action_l, mask_l, w: LossWeights = LossWeights()):
    return action_l + w.lambda_mask * mask_l


def total_async(action_l, mask_l, forecast_l, w: LossWeights = LossWeights(),
                mask_logits: MaskLogits | None = None):
    """action + lambda_mask * mask + lambda_forecast * forecast.

    When ``mask_logits`` is given its provenance must be the small encoder.
    """
    if mask_logits is not None and mask_logits.source != "small":
        raise ContractError(
            f"async mask loss must use small-model tokens, got {mask_logits.source!r} provenance")
    return action_l + w.lambda_mask * mask_l + w.lambda_forecast * forecast_l
