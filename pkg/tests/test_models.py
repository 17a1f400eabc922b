import numpy as np
import pytest

from conftest import perturb
from etadrive import tensor as T
from etadrive.errors import ConfigError, DimensionError
from etadrive.harness import TrainConfig, compute_losses
from etadrive.losses import action_loss
from etadrive.models import (MODES, N_POOLED, N_TOKENS, DrivingModel, EncoderConfig,
                             ModelConfig, patchify)
from etadrive.tensor import GradTape, Tensor


def encoders(model, frames):
    return model.encode_large(frames), model.encode_small(frames)


def test_token_counts_and_shapes(batch):
    m = DrivingModel("full", seed=0)
    large, small = encoders(m, batch["frame_t"])
    assert large.pre_pool.shape == (4, N_TOKENS, 32) and N_TOKENS == 32
    assert large.pooled.shape == (4, N_POOLED, 32)
    assert N_TOKENS // large.pooled.shape[1] == 4
    assert small.pooled.shape == large.pooled.shape
    assert small.pre_pool.shape == large.pre_pool.shape
    fc = m.forecast(large.pooled, batch["act_prev"], batch["cond_prev"])
    assert fc.shape == large.pooled.shape
    out = m.act(large_prev=large.pooled, action_prev=batch["act_prev"], cond_prev=batch["cond_prev"],
                small=small, large_now=None, cond_now=batch["cond_t"])
    assert out.residuals.shape == (4, 14, 2)
    assert out.mask.logits.shape == (4, 4, 8) and out.mask.source == "small"


def test_base_mask_attends_to_large_tokens(batch):
    m = DrivingModel("base", seed=0)
    out = m.act(large_prev=None, action_prev=None, cond_prev=None, small=None,
                large_now=m.encode_large(batch["frame_t"]), cond_now=batch["cond_t"])
    assert out.mask.source == "large"


def test_small_depth_is_a_third():
    assert EncoderConfig(depth=6).small().depth == 2
    assert EncoderConfig(depth=2).small().depth == 1
    m = DrivingModel("full")
    assert len(m.large.blocks) == 6 and len(m.small.blocks) == 2


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(dim=30, heads=4)
    with pytest.raises(ConfigError):
        DrivingModel("turbo")


def test_patchify_rejects_wrong_frame():
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 4, 32, 32)))


def test_forecaster_is_identity_at_init(batch):
    m = DrivingModel("full", seed=1)
    pooled = m.encode_large(batch["frame_prev"]).pooled
    fc = m.forecast(pooled, batch["act_prev"], batch["cond_prev"])
    assert np.array_equal(fc.tokens.data, pooled.tokens.data)


def test_forecast_depends_on_conditioning(batch):
    m = perturb(DrivingModel("full", seed=2))
    pooled = m.encode_large(batch["frame_prev"]).pooled
    a = m.forecast(pooled, batch["act_prev"], batch["cond_prev"]).tokens.data
    cond = batch["cond_prev"].copy()
    cond[:, 0] += 2.0
    b = m.forecast(pooled, batch["act_prev"], cond).tokens.data
    assert np.abs(a - b).max() > 1e-4


def test_forecast_gradient_reaches_previous_action(batch):
    m = perturb(DrivingModel("full", seed=3))
    pooled = m.encode_large(batch["frame_prev"]).pooled
    act = Tensor(batch["act_prev"], requires_grad=True)
    with GradTape() as tape:
        fc = m.forecast(pooled, act, batch["cond_prev"])
        root = T.mean(T.tabs(fc.tokens - Tensor(np.zeros(fc.shape))))
    assert np.linalg.norm(tape.backward(root)[act]) > 0


def test_zero_head_gives_mean_abs_expert(batch):
    m = DrivingModel("full", seed=0)
    large, small = encoders(m, batch["frame_t"])
    out = m.act(large_prev=large.pooled, action_prev=batch["act_prev"], cond_prev=batch["cond_prev"],
                small=small, large_now=None, cond_now=batch["cond_t"])
    assert not out.residuals.data.any()
    loss = float(action_loss(out.residuals, batch["act_t"]).data)
    assert loss == pytest.approx(np.abs(batch["act_t"]).mean(), rel=1e-12)


def test_every_parameter_gets_gradient(batch):
    m = perturb(DrivingModel("full", seed=4))
    params = m.params()
    with GradTape() as tape:
        comp = compute_losses(m, batch, TrainConfig())
    grads = tape.backward(comp["total"])
    dead = [k for k, p in params.items() if p not in grads or not np.abs(grads[p]).sum() > 0]
    assert not dead


def test_tile_swap_permutes_tokens():
    rng = np.random.default_rng(5)
    cfg = EncoderConfig(depth=2, pool=False)
    m = perturb(DrivingModel("base", ModelConfig(encoder=cfg), seed=5))
    frame = rng.uniform(0, 1, (1, 4, 32, 64))
    swapped = np.concatenate([frame[..., 32:], frame[..., :32]], axis=-1)
    out = m.encode_large(frame).pre_pool.tokens.data[0]
    enc = m.large
    half = N_TOKENS // 2
    enc.pos.data = np.concatenate([enc.pos.data[half:], enc.pos.data[:half]])
    enc.tile.data = enc.tile.data[::-1].copy()
    out2 = enc(swapped).pre_pool.tokens.data[0]
    np.testing.assert_allclose(out2, np.concatenate([out[half:], out[:half]]), rtol=0, atol=1e-12)


def test_same_seed_same_model_and_outputs(batch):
    a, b = DrivingModel("full", seed=7), DrivingModel("full", seed=7)
    pa, pb = a.params(), b.params()
    assert list(pa) == list(pb)
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    la, lb = a.encode_large(batch["frame_t"]), b.encode_large(batch["frame_t"])
    assert np.array_equal(la.pooled.tokens.data, lb.pooled.tokens.data)


def test_parameter_namespaces():
    names = DrivingModel("full").params()
    prefixes = {k.split(".")[0] for k in names}
    assert prefixes == {"large", "small", "forecast", "action"}


@pytest.mark.parametrize("mode", MODES)
def test_needs_cover_each_mode(mode):
    m = DrivingModel(mode)
    needs = m.needs()
    assert needs["small"] == (m.small is not None)
    assert not needs["forecast"] or m.forecast is not None
