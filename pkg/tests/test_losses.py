import math

import numpy as np
import pytest

from etadrive.errors import ConfigError, ContractError, DimensionError
from etadrive.losses import (LossWeights, action_loss, forecast_loss, mask_loss, total_async,
                             total_base)
from etadrive.models import MaskLogits, TokenGrid
from etadrive.tensor import GradTape, Tensor, grad_check, stop_grad


def value(t):
    return float(t.data)


def test_action_loss_examples():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(14, 2))
    assert value(action_loss(e, e)) == 0.0
    assert value(action_loss(e + 1.0, e)) == pytest.approx(1.0, abs=1e-15)
    p = rng.normal(size=(3, 14, 2))
    q = rng.normal(size=(3, 14, 2))
    expected = sum(abs(a - b) for a, b in zip(p.ravel(), q.ravel())) / p.size
    assert value(action_loss(p, q)) == pytest.approx(expected, rel=1e-12)


def test_action_loss_shape_errors():
    with pytest.raises(DimensionError):
        action_loss(np.zeros((14, 2)), np.zeros((13, 2)))
    with pytest.raises(DimensionError):
        action_loss(np.zeros((10, 2)), np.zeros((10, 2)))


def test_mask_loss_examples():
    rng = np.random.default_rng(1)
    m = rng.uniform(size=(4, 8)) > 0.5
    sat = np.where(m, 30.0, -30.0)
    assert value(mask_loss(sat, m)) < 1e-9
    assert value(mask_loss(np.zeros((4, 8)), m)) == pytest.approx(math.log(2), rel=1e-15)
    x = rng.normal(scale=3, size=(4, 8))
    direct = 0.0
    for xi, yi in zip(x.ravel(), m.ravel()):
        p = 1 / (1 + math.exp(-xi))
        direct -= math.log(p) if yi else math.log(1 - p)
    assert value(mask_loss(x, m)) == pytest.approx(direct / 32, rel=1e-12)


def test_mask_loss_is_stable_for_large_logits():
    m = np.zeros((4, 8), dtype=bool)
    assert value(mask_loss(np.full((4, 8), 800.0), m)) == pytest.approx(800.0)


def test_mask_loss_shape_error():
    with pytest.raises(DimensionError):
        mask_loss(np.zeros((4, 4)), np.zeros((4, 4)))


def test_forecast_loss_requires_stop_grad():
    g = Tensor(np.ones((8, 32)))
    with pytest.raises(ContractError):
        forecast_loss(g, g)
    with pytest.raises(ContractError):
        forecast_loss(TokenGrid(g, "large"), g)
    assert value(forecast_loss(stop_grad(g), g)) == 0.0
    with pytest.raises(DimensionError):
        forecast_loss(stop_grad(g), Tensor(np.ones((8, 31))))


def test_forecast_loss_gradients():
    rng = np.random.default_rng(2)
    up = Tensor(rng.normal(size=(8, 32)), requires_grad=True)
    pred = Tensor(rng.normal(size=(8, 32)), requires_grad=True)
    with GradTape() as tape:
        root = forecast_loss(stop_grad(up * 2.0), pred * 1.5)
    g = tape.backward(root)
    assert up not in g
    rep = grad_check(lambda: forecast_loss(stop_grad(up * 2.0), pred * 1.5), {"pred": pred})
    assert rep.ok, rep.failures()


def test_totals():
    assert total_base(0.0, 0.0) == 0.0
    assert total_base(1.0, 16.0) == 2.0
    assert total_base(0.5, 0.8) == pytest.approx(0.55)
    assert total_async(0.0, 0.0, 0.0) == 0.0
    assert total_async(1.0, 16.0, 2.0) == 3.0


def test_total_async_checks_mask_provenance():
    logits = MaskLogits(Tensor(np.zeros((1, 4, 8))), "large")
    with pytest.raises(ContractError):
        total_async(1.0, 1.0, 1.0, mask_logits=logits)
    ok = MaskLogits(Tensor(np.zeros((1, 4, 8))), "small")
    assert total_async(1.0, 16.0, 2.0, mask_logits=ok) == 3.0


def test_weights():
    w = LossWeights()
    assert (w.lambda_mask, w.lambda_forecast) == (1 / 16, 0.5)
    with pytest.raises(ConfigError):
        LossWeights(lambda_mask=-1.0)


def test_losses_are_permutation_invariant():
    rng = np.random.default_rng(3)
    x, m = rng.normal(size=(4, 8)), rng.uniform(size=(4, 8)) > 0.5
    perm = rng.permutation(32)
    a = value(mask_loss(x, m))
    b = value(mask_loss(x.ravel()[perm].reshape(4, 8), m.ravel()[perm].reshape(4, 8)))
    assert a == pytest.approx(b, rel=1e-14)
    p, q = rng.normal(size=(14, 2)), rng.normal(size=(14, 2))
    k = rng.permutation(14)
    assert value(action_loss(p, q)) == pytest.approx(value(action_loss(p[k], q[k])), rel=1e-14)
    f, g = rng.normal(size=(8, 32)), rng.normal(size=(8, 32))
    t = rng.permutation(8)
    assert (value(forecast_loss(stop_grad(Tensor(f)), Tensor(g)))
            == pytest.approx(value(forecast_loss(stop_grad(Tensor(f[t])), Tensor(g[t]))), rel=1e-14))
