"""Encoders, feature forecaster and action decoder.

All networks take a leading batch axis. Token order inside an encoder is
(tile, row, col): the frame is cut into a left and a right 32x32 tile, each
tile into 4x4 patches of 8x8 pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, DimensionError
from .plan import N_POINTS, ActionPlan, reconstruct_action, to_residuals
from .tensor import Tensor
from .toyworld.camera import FRAME_CHANNELS, FRAME_H, FRAME_W, MASK_COLS, MASK_ROWS, PATCH

__all__ = [
    "EncoderConfig", "ModelConfig", "TokenGrid", "MaskLogits", "Encoder", "Forecaster",
    "ActionModel", "DrivingModel", "MODES", "scale_conditioning", "reconstruct_action",
    "to_residuals",
]

N_TILES = 2
TILE = FRAME_H
GRID_SIDE = TILE // PATCH                        # 4 patches per tile side
N_TOKENS = N_TILES * GRID_SIDE * GRID_SIDE       # 32
POOL = 2
N_POOLED = N_TOKENS // (POOL * POOL)             # 8
PATCH_DIM = FRAME_CHANNELS * PATCH * PATCH
COND_DIM = 5
RESIDUAL_SCALE = 3.0
SPEED_SCALE = 5.0
WAYPOINT_SCALE = 10.0

MODES = ("base", "full", "no_forecast", "no_small", "small_only", "gt_forecast",
         "gt_forecast_test_only", "no_mask")


def _token_layout() -> list[tuple[int, int, int]]:
    return [(t, r, c) for t in range(N_TILES) for r in range(GRID_SIDE) for c in range(GRID_SIDE)]


TOKEN_LAYOUT = tuple(_token_layout())
# token index -> flat index in the (MASK_ROWS, MASK_COLS) patch grid
MASK_ORDER = np.array([r * MASK_COLS + t * GRID_SIDE + c for t, r, c in TOKEN_LAYOUT])


def _pool_matrix() -> np.ndarray:
    """(8, 32) averaging matrix: 2x2 blocks of each tile's 4x4 token grid."""
    P = np.zeros((N_POOLED, N_TOKENS))
    side = GRID_SIDE // POOL
    for i, (t, r, c) in enumerate(TOKEN_LAYOUT):
        P[t * side * side + (r // POOL) * side + c // POOL, i] = 1.0 / (POOL * POOL)
    return P


POOL_MATRIX = _pool_matrix()


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 6
    dim: int = 32
    heads: int = 4
    patch: int = PATCH
    pool: bool = True
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.depth < 1 or self.dim < 1 or self.heads < 1:
            raise ConfigError("encoder depth, dim and heads must be positive")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patch != PATCH:
            raise ConfigError(f"patch size is fixed at {PATCH} by the frame layout")

    def small(self) -> "EncoderConfig":
        return replace(self, depth=max(1, self.depth // 3))


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    forecast_depth: int = 2
    decoder_depth: int = 2

    @property
    def dim(self) -> int:
        return self.encoder.dim


@dataclass(frozen=True)
class TokenGrid:
    """Token features (B, N, D) with per-token provenance.

    ``source`` names the producing network ('large', 'small', 'forecast');
    ``layout`` is (tile, row, col) per token or ``'pooled'``.
    """

    tokens: Tensor
    source: str
    layout: tuple | str = "pooled"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tokens.shape


@dataclass(frozen=True)
class MaskLogits:
    """Per-patch logits (B, 4, 8) and the source of the tokens they attend to."""

    logits: Tensor
    source: str


@dataclass(frozen=True)
class EncoderOutput:
    pre_pool: TokenGrid
    pooled: TokenGrid


def patchify(frames: np.ndarray) -> np.ndarray:
    """(B, 4, 32, 64) frames -> (B, 32, 256) patch vectors in token order."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim == 3:
        f = f[None]
    if f.shape[1:] != (FRAME_CHANNELS, FRAME_H, FRAME_W):
        raise DimensionError(f"frames must be (B, {FRAME_CHANNELS}, {FRAME_H}, {FRAME_W}), got {f.shape}")
    b = f.shape[0]
    # (B, C, rows, P, tiles, cols, P) -> (B, tiles, rows, cols, C, P, P)
    x = f.reshape(b, FRAME_CHANNELS, GRID_SIDE, PATCH, N_TILES, GRID_SIDE, PATCH)
    x = x.transpose(0, 4, 2, 5, 1, 3, 6)
    return x.reshape(b, N_TOKENS, PATCH_DIM)


class Encoder(nn.Module):
    """Patch embedding, learned (tile, row, col) and tile embeddings, pre-norm
    blocks, then 2x2 mean pooling inside each tile."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, source: str):
        self._cfg = cfg
        self._source = source
        self.proj = nn.Linear(PATCH_DIM, cfg.dim, rng)
        self.pos = nn._param(nn.trunc_normal(rng, (N_TOKENS, cfg.dim)))
        self.tile = nn._param(nn.trunc_normal(rng, (N_TILES, cfg.dim)))
        self.blocks = [nn.Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.ln = nn.LayerNorm(cfg.dim)

    @property
    def config(self) -> EncoderConfig:
        return self._cfg

    def __call__(self, frames: np.ndarray) -> EncoderOutput:
        x = self.proj(Tensor(patchify(frames)))
        tile_rows = T.getitem(self.tile, np.repeat(np.arange(N_TILES), N_TOKENS // N_TILES))
        x = x + (self.pos + tile_rows)
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        pre = TokenGrid(x, self._source, TOKEN_LAYOUT)
        if not self._cfg.pool:
            return EncoderOutput(pre, pre)
        pooled = T.matmul(Tensor(POOL_MATRIX), x)
        return EncoderOutput(pre, TokenGrid(pooled, self._source, "pooled"))


def scale_conditioning(cond: np.ndarray) -> np.ndarray:
    """[speed, w1x, w1y, w2x, w2y] -> roughly unit-range network inputs."""
    c = np.asarray(cond, dtype=np.float64)
    if c.shape[-1] != COND_DIM:
        raise DimensionError(f"conditioning must have {COND_DIM} entries, got {c.shape}")
    scale = np.array([SPEED_SCALE] + [WAYPOINT_SCALE] * (COND_DIM - 1))
    return c / scale


def _batch2(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what} must be (B, {width}), got {x.shape}")
    return x


class Forecaster(nn.Module):
    """Predicts current large-encoder tokens from stale ones.

    The flattened previous action residuals, speed and target waypoints are
    concatenated onto every token along the feature axis, projected back to
    D and passed through a small encoder. The output is a correction added to
    the stale tokens; its projection starts at zero, so an untrained
    forecaster is the identity.
    """

    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.inp = nn.Linear(dim + 2 * N_POINTS + COND_DIM, dim, rng)
        self.blocks = [nn.Block(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.ln = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, dim, rng, zero=True)

    def __call__(self, feat_prev: TokenGrid, action_prev, cond_prev: np.ndarray) -> TokenGrid:
        f = feat_prev.tokens
        if f.ndim != 3:
            raise DimensionError(f"forecast input must be (B, N, D), got {f.shape}")
        b, n, d = f.shape
        if isinstance(action_prev, Tensor):
            act = action_prev.reshape(b, 2 * N_POINTS) * (1.0 / RESIDUAL_SCALE)
        else:
            act = Tensor(_batch2(np.asarray(action_prev).reshape(b, -1), 2 * N_POINTS, "action")
                         / RESIDUAL_SCALE)
        cond = Tensor(scale_conditioning(_batch2(cond_prev, COND_DIM, "conditioning")))
        if act.shape[0] != b or cond.shape[0] != b:
            raise DimensionError(f"batch mismatch: tokens {f.shape}, action {act.shape}, cond {cond.shape}")
        ctx = T.concat([act, cond], axis=1).reshape(b, 1, -1)
        ctx = T.expand(ctx, (b, n, ctx.shape[-1]))
        x = self.inp(T.concat([f, ctx], axis=2))
        for blk in self.blocks:
            x = blk(x)
        return TokenGrid(f + self.out(self.ln(x)), "forecast", feat_prev.layout)


class ActionModel(nn.Module):
    """Parallel query decoder over [conditioning token; feature grids].

    Queries are learned per output point plus a projection of the conditioning.

    Emits 14 residuals (10 path, 4 waypoints) and per-patch mask logits from
    query/patch-token attention scores, max-pooled over queries.
    """

    def __init__(self, dim: int, n_grids: int, depth: int, heads: int, mlp_ratio: int,
                 rng: np.random.Generator):
        self._n_grids = n_grids
        self._dim = dim
        self.cond = nn.Linear(COND_DIM, dim, rng)
        self.cond_query = nn.Linear(COND_DIM, dim, rng)
        self.source = nn._param(nn.trunc_normal(rng, (n_grids, dim)))
        self.queries = nn._param(nn.trunc_normal(rng, (N_POINTS, dim)))
        self.blocks = [nn.DecoderBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]
        self.ln = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 2, rng, zero=True)
        self.mask_q = nn.Linear(dim, dim, rng)
        self.mask_k = nn.Linear(dim, dim, rng)
        self.mask_bias = nn._param(np.zeros(1))

    @property
    def n_grids(self) -> int:
        return self._n_grids

    def __call__(self, feats: list[TokenGrid], cond: np.ndarray,
                 mask_tokens: TokenGrid | None = None) -> tuple[Tensor, MaskLogits | None]:
        if len(feats) != self._n_grids:
            raise DimensionError(f"action model expects {self._n_grids} grids, got {len(feats)}")
        b = feats[0].tokens.shape[0]
        for g in feats:
            if g.tokens.ndim != 3 or g.tokens.shape[0] != b or g.tokens.shape[2] != self._dim:
                raise DimensionError(f"feature grid shape {g.tokens.shape} incompatible with D={self._dim}")
        c = Tensor(scale_conditioning(_batch2(cond, COND_DIM, "conditioning")))
        if c.shape[0] != b:
            raise DimensionError(f"conditioning batch {c.shape[0]} != features batch {b}")
        parts = [self.cond(c).reshape(b, 1, self._dim)]
        for i, g in enumerate(feats):
            parts.append(g.tokens + self.source[i])
        memory = T.concat(parts, axis=1)
        # the conditioning also shifts every query, so route geometry reaches the head directly
        shift = T.expand(self.cond_query(c).reshape(b, 1, self._dim), (b, N_POINTS, self._dim))
        x = T.expand(self.queries, (b, N_POINTS, self._dim)) + shift
        for blk in self.blocks:
            x = blk(x, memory)
        h = self.ln(x)
        residuals = self.head(h) * RESIDUAL_SCALE
        mask = None
        if mask_tokens is not None:
            mask = self._mask_logits(h, mask_tokens)
        return residuals, mask

    def _mask_logits(self, h: Tensor, grid: TokenGrid) -> MaskLogits:
        if grid.layout == "pooled":
            raise DimensionError("mask attention needs pre-pool patch tokens")
        q = self.mask_q(h)
        k = self.mask_k(grid.tokens)
        scores = T.matmul(q, T.swapaxes(k, 1, 2)) * (1.0 / math.sqrt(self._dim))
        per_token = T.tmax(scores, axis=1) + self.mask_bias          # (B, 32)
        inv = np.argsort(MASK_ORDER)
        grid_logits = T.getitem(per_token, (slice(None), inv))
        b = per_token.shape[0]
        return MaskLogits(grid_logits.reshape(b, MASK_ROWS, MASK_COLS), grid.source)


# which networks each mode instantiates, and how many grids the action model fuses
_WIRING = {
    "base": (("large",), 1),
    "full": (("large", "small", "forecast"), 2),
    "no_mask": (("large", "small", "forecast"), 2),
    "gt_forecast_test_only": (("large", "small", "forecast"), 2),
    "no_forecast": (("large", "small"), 2),
    "no_small": (("large", "forecast"), 1),
    "small_only": (("small",), 1),
    "gt_forecast": (("large", "small"), 2),
}


def check_mode(mode: str) -> str:
    if mode not in _WIRING:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return mode


def train_kind(mode: str) -> str:
    """Mode whose trained weights a mode runs with."""
    return "full" if check_mode(mode) == "gt_forecast_test_only" else mode


@dataclass
class StepOutput:
    residuals: Tensor
    mask: MaskLogits | None
    forecast: TokenGrid | None = None
    gt_large: TokenGrid | None = None
    large_current: EncoderOutput | None = None


class DrivingModel(nn.Module):
    """The networks one mode needs, namespaced ``large.``, ``small.``,
    ``forecast.`` and ``action.``."""

    def __init__(self, mode: str, cfg: ModelConfig | None = None, seed: int = 0):
        self._mode = check_mode(mode)
        self._cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        parts, n_grids = _WIRING[self._mode]
        e = self._cfg.encoder
        # construction order is fixed so a given seed always yields the same weights per name
        self.large = Encoder(e, rng, "large") if "large" in parts else None
        self.small = Encoder(e.small(), rng, "small") if "small" in parts else None
        self.forecast = (Forecaster(e.dim, self._cfg.forecast_depth, e.heads, e.mlp_ratio, rng)
                         if "forecast" in parts else None)
        self.action = ActionModel(e.dim, n_grids, self._cfg.decoder_depth, e.heads, e.mlp_ratio, rng)

    @property
    def mode(self) -> str:
        return self._mode

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def encode_large(self, frames: np.ndarray) -> EncoderOutput:
        return self.large(frames)

    def encode_small(self, frames: np.ndarray) -> EncoderOutput:
        return self.small(frames)

    def act(self, *, large_prev: TokenGrid | None, action_prev, cond_prev,
            small: EncoderOutput | None, large_now: EncoderOutput | None,
            cond_now, wiring: str | None = None) -> StepOutput:
        """Fuse whatever the wiring needs into residuals and mask logits.

        ``large_prev``: pooled large tokens of frame t-Delta. ``large_now``:
        large encoder output on the current frame (base and GT wirings).
        """
        mode = wiring or self._mode
        mask_src = small.pre_pool if small is not None else None
        fc = None
        if mode == "base":
            feats = [large_now.pooled]
            mask_src = large_now.pre_pool
        elif mode in ("full", "no_mask"):
            fc = self.forecast(large_prev, action_prev, cond_prev)
            feats = [fc, small.pooled]
        elif mode == "no_forecast":
            feats = [large_prev, small.pooled]
        elif mode == "no_small":
            fc = self.forecast(large_prev, action_prev, cond_prev)
            feats = [fc]
        elif mode == "small_only":
            feats = [small.pooled]
        elif mode in ("gt_forecast", "gt_forecast_test_only"):
            feats = [large_now.pooled, small.pooled]
        else:  # pragma: no cover - guarded by check_mode
            raise ConfigError(mode)
        residuals, mask = self.action(feats, cond_now, mask_src)
        return StepOutput(residuals, mask, fc)

    def needs(self, wiring: str | None = None) -> dict[str, bool]:
        """Which inputs a tick needs: current large, stale large, small."""
        mode = wiring or self._mode
        return {
            "large_now": mode in ("base", "gt_forecast", "gt_forecast_test_only"),
            "large_prev": mode in ("full", "no_mask", "no_forecast", "no_small"),
            "small": mode not in ("base", "no_small"),
            "forecast": mode in ("full", "no_mask", "no_small"),
        }

    def copy_from(self, arrays: dict[str, np.ndarray]) -> None:
        self.load_arrays(arrays)


def plan_from_output(residuals: Tensor, index: int = 0) -> ActionPlan:
    return reconstruct_action(residuals.data[index])
