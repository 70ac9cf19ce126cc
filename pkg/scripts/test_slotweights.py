"""
车位感知权重测试：形状函数、混合、边管栅格化、上采样与反投影
"""

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from common.exceptions import NumericalError, ShapeMismatchError
from core.slotweights import (SlotWeightConfig, WeightMap, build_slot_weights, check_weight_bounds, combine,
                              mix_backward, mix_corner, rasterize_edges, select_edges, shape_weights,
                              shape_weights_backward, slot_weights_backward, upsample, upsample_backward)


@pytest.mark.parametrize("h, gamma, expected", [(0.25, 1.0, 0.5), (0.75, 1.0, 0.7310585786300049),
                                                (0.25, 2.0, 0.25)])
def test_shape_weights(h, gamma, expected):
    w = shape_weights(np.array([h]), tau=0.25, temperature=0.5, gamma=gamma)
    assert w.values[0] == pytest.approx(expected)


def test_shape_weights_backward_matches_finite_differences():
    h = np.linspace(-0.5, 1.5, 9)
    g = shape_weights_backward(h, np.ones_like(h), gamma=1.7)
    eps = 1e-6
    fd = (shape_weights(h + eps, gamma=1.7).values - shape_weights(h - eps, gamma=1.7).values) / (2 * eps)
    np.testing.assert_allclose(g, fd, rtol=1e-6)


def test_mix_blocks_gradient_to_student():
    teacher = WeightMap(np.ones((2, 2)), gradient_allowed=False)
    student = WeightMap(np.zeros((2, 2)))
    mixed = mix_corner(teacher, student, alpha=0.8)
    np.testing.assert_allclose(mixed.values, 0.8)
    assert not mixed.gradient_allowed
    np.testing.assert_array_equal(mix_backward(np.ones((2, 2)), 0.8), 0.0)
    np.testing.assert_allclose(mix_backward(np.ones((2, 2)), 0.8, stop_gradient=False), 0.2)


def test_mix_shape_mismatch():
    with pytest.raises(ShapeMismatchError) as exc:
        mix_corner(WeightMap(np.ones((2, 2))), WeightMap(np.ones((3, 2))))
    assert exc.value.error_code == "WEIGHT_SHAPE_MISMATCH"


def test_combine_adds_scaled_edges():
    out = combine(WeightMap(np.full((2, 2), 0.8)), WeightMap(np.full((2, 2), 0.5)), lambda_edge=0.5)
    np.testing.assert_allclose(out.values, 1.05)


def test_select_edges_orders_by_score_then_index():
    scores = np.zeros((4, 4))
    for (i, j), s in {(0, 1): 0.9, (2, 3): 0.9, (0, 2): 0.7, (1, 3): 0.4}.items():
        scores[i, j] = scores[j, i] = s
    assert select_edges(scores, top_k=2, min_score=0.5) == [(0, 1), (2, 3)]
    assert select_edges(scores, top_k=5, min_score=0.5) == [(0, 1), (2, 3), (0, 2)]


def test_edge_tube_profile():
    corners = np.array([[0.0, 18.5], [31.0, 18.5]])
    scores = np.array([[0.0, 0.9], [0.9, 0.0]])
    tube = rasterize_edges(corners, scores, (40, 40), sigma_tube=1.5, samples=32)
    assert not tube.gradient_allowed
    assert tube.values[20, 10] == pytest.approx(np.exp(-0.5), rel=1e-9)
    assert tube.values[0, 10] == 0.0
    assert tube.values[20, 38] == 0.0
    assert tube.values.max() <= 1.0


def test_edge_tube_ignores_weak_edges_and_aggregates():
    corners = np.array([[5.0, 10.0], [30.0, 10.0], [5.0, 20.0]])
    scores = np.zeros((3, 3))
    scores[0, 1] = scores[1, 0] = 0.9
    scores[0, 2] = scores[2, 0] = 0.3
    tube = rasterize_edges(corners, scores, (32, 40))
    assert tube.values[18, 5] == 0.0
    crossing = np.array([[0.0, 10.0], [20.0, 10.0], [10.0, 0.0], [10.0, 20.0]])
    s = np.zeros((4, 4))
    s[0, 1] = s[1, 0] = s[2, 3] = s[3, 2] = 0.9
    summed = rasterize_edges(crossing, s, (24, 24), samples=21, aggregation='sum')
    maxed = rasterize_edges(crossing, s, (24, 24), samples=21, aggregation='max')
    assert summed.values[10, 10] == pytest.approx(2.0)
    assert maxed.values[10, 10] == pytest.approx(1.0)


def test_upsample_preserves_constants_and_has_adjoint():
    np.testing.assert_allclose(upsample(np.full((4, 5), 0.3), 4, (16, 20)), 0.3)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    g = rng.normal(size=(16, 20))
    lhs = float(np.sum(upsample(x, 4, (16, 20)) * g))
    rhs = float(np.sum(x * upsample_backward(g, 4, (4, 5))))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_weight_bounds():
    check_weight_bounds(WeightMap(np.full((2, 2), 1.5)), lambda_edge=0.5)
    with pytest.raises(NumericalError) as exc:
        check_weight_bounds(WeightMap(np.full((2, 2), 1.6)), lambda_edge=0.5)
    assert exc.value.error_code == "BAD_WEIGHTS"
    with pytest.raises(NumericalError):
        check_weight_bounds(WeightMap(np.array([[-0.1]])), lambda_edge=0.5)
    with pytest.raises(NumericalError):
        check_weight_bounds(WeightMap(np.array([[np.nan]])), lambda_edge=0.5)
    check_weight_bounds(WeightMap(np.full((2, 2), 1.6)), lambda_edge=0.5, aggregation='sum')


def _weights_inputs(seed=1):
    rng = np.random.default_rng(seed)
    teacher = rng.uniform(size=(16, 16))
    student = rng.uniform(size=(16, 16))
    t_corners = np.array([[10.0, 20.0], [40.0, 20.0]])
    t_scores = np.array([[0.0, 0.95], [0.95, 0.0]])
    return teacher, student, t_corners, t_scores, np.zeros((0, 2)), np.zeros((0, 0))


def test_build_slot_weights(small_grid):
    weights = build_slot_weights(*_weights_inputs(), grid=small_grid, stride=4)
    assert weights.combined.shape == (64, 64)
    assert weights.corner_mix.shape == (16, 16)
    assert len(weights.camera) == 4 and all(c.shape == (48, 64) for c in weights.camera)
    assert weights.combined.values.min() >= 0.0
    assert weights.combined.values.max() <= 1.5 + 1e-9
    np.testing.assert_array_equal(weights.edge_student.values, 0.0)
    # 教师边管沿 v=20 的入口线
    assert weights.edge_mix.values[20, 10] == pytest.approx(0.8)


def test_slot_weights_backward_is_zero_under_stop_gradient(small_grid):
    weights = build_slot_weights(*_weights_inputs(), grid=small_grid, stride=4)
    grad = slot_weights_backward(weights, np.ones((64, 64)), [np.ones((48, 64))] * 4, small_grid, 4)
    assert grad.shape == (16, 16)
    np.testing.assert_array_equal(grad, 0.0)


def test_slot_weights_backward_matches_finite_differences(small_grid):
    config = SlotWeightConfig(stop_gradient=False)
    teacher, student, *rest = _weights_inputs()
    rng = np.random.default_rng(2)
    G = rng.normal(size=(64, 64))
    Gc = [rng.normal(size=(48, 64)) for _ in range(4)]

    def loss(s):
        w = build_slot_weights(teacher, s, *rest, grid=small_grid, stride=4, config=config)
        return float(np.sum(w.combined.values * G) + sum(np.sum(c * g) for c, g in zip(w.camera, Gc)))

    weights = build_slot_weights(teacher, student, *rest, grid=small_grid, stride=4, config=config)
    analytic = slot_weights_backward(weights, G, Gc, small_grid, 4, config)
    h = 1e-6
    for i, j in [(0, 0), (3, 7), (8, 8), (15, 2)]:
        plus, minus = student.copy(), student.copy()
        plus[i, j] += h
        minus[i, j] -= h
        assert analytic[i, j] == pytest.approx((loss(plus) - loss(minus)) / (2 * h), rel=1e-5, abs=1e-8)


@given(h=st.lists(st.floats(min_value=-5.0, max_value=5.0), min_size=2, max_size=20),
       gamma=st.floats(min_value=0.5, max_value=3.0))
@hsettings(max_examples=60, deadline=None)
def test_shape_weights_are_monotone_and_bounded(h, gamma):
    h = np.sort(np.array(h))
    w = shape_weights(h, gamma=gamma).values
    assert np.all(np.diff(w) >= 0.0)
    assert np.all((w >= 0.0) & (w <= 1.0))
