import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from etadrive.errors import DimensionError, NumericError
from etadrive.plan import ActionPlan, reconstruct_action, to_residuals

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (14, 2), elements=finite))
def test_reconstruct_then_residuals_is_identity(res):
    np.testing.assert_allclose(to_residuals(reconstruct_action(res)), res, rtol=0, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (10, 2), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_residuals_then_reconstruct_is_identity(path, wps):
    plan = ActionPlan(path, wps)
    back = reconstruct_action(plan.residuals())
    np.testing.assert_allclose(back.path, path, rtol=0, atol=1e-9)
    np.testing.assert_allclose(back.waypoints, wps, rtol=0, atol=1e-9)


def test_zero_residuals_give_origin_plan():
    plan = reconstruct_action(np.zeros((14, 2)))
    assert not plan.points().any()


def test_unit_steps_accumulate():
    res = np.zeros((14, 2))
    res[:10, 0] = 1.0
    plan = reconstruct_action(res)
    np.testing.assert_array_equal(plan.path[:, 0], np.arange(1.0, 11.0))
    assert not plan.waypoints.any()


def test_groups_are_independent():
    res = np.zeros((14, 2))
    res[9] = [5.0, 5.0]
    plan = reconstruct_action(res)
    assert not plan.waypoints.any()


def test_non_finite_residuals_raise():
    res = np.zeros((14, 2))
    res[3, 1] = np.inf
    with pytest.raises(NumericError):
        reconstruct_action(res)


def test_wrong_shape_raises():
    with pytest.raises(DimensionError):
        reconstruct_action(np.zeros((13, 2)))


def test_straight_plan_properties():
    path = np.column_stack([np.arange(1.0, 11.0), np.zeros(10)])
    wps = np.column_stack([3.0 * np.arange(1, 5), np.zeros(4)])
    plan = ActionPlan(path, wps)
    assert plan.is_monotone()
    np.testing.assert_allclose(plan.path_arc_lengths(), np.arange(1.0, 11.0))
    assert plan.target_speed() == pytest.approx(6.0)
