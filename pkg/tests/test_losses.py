import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesionseg import metrics
from lesionseg.losses import (LossConfig, PixelProbs, focal_tversky_from_index, focal_tversky_loss, hybrid_loss,
                              hybrid_loss_components, resolve_lesion_weight, tversky_index, weighted_bce)
from lesionseg.tensor import ShapeError

masks = arrays(np.uint8, (6, 6), elements=st.integers(0, 1))
prob_maps = arrays(np.float64, (6, 6), elements=st.floats(0.0, 1.0))


def test_tversky_closed_form():
    # one TP, one FP, one FN
    probs = PixelProbs(np.array([1.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0, 1.0, 0.0]))
    assert tversky_index(probs, 0.7, 0.3, smooth=0.0) == pytest.approx(0.5, abs=1e-12)


def test_focal_tversky_closed_form():
    assert focal_tversky_from_index(0.5, 4 / 3) == pytest.approx(0.5**0.75, abs=1e-6)


def test_default_loss_weights():
    cfg = LossConfig()
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (0.7, 0.3, pytest.approx(4 / 3))


@given(masks, masks)
def test_tversky_half_half_equals_dice_on_hard_masks(pred, gt):
    ti = tversky_index(PixelProbs(pred, gt), 0.5, 0.5, smooth=0.0)
    assert ti == pytest.approx(metrics.dsc(metrics.confusion(pred, gt)), abs=1e-6)


def _bce_oracle(p, g, w):
    total = 0.0
    for pi, gi in zip(p.ravel(), g.ravel()):
        pc = min(max(pi, 1e-7), 1 - 1e-7)
        total += -(w * gi * math.log(pc) + (1 - gi) * math.log(1 - pc))
    return total / p.size


@given(prob_maps, masks, st.floats(1.0, 50.0))
def test_weighted_bce_matches_pixel_loop(p, g, w):
    assert weighted_bce(PixelProbs(p, g), w) == pytest.approx(_bce_oracle(p, g, w), rel=1e-9, abs=1e-12)


@given(prob_maps, masks)
def test_kappa_zero_hybrid_is_bitwise_bce(p, g):
    cfg = LossConfig(kappa=0.0)
    value, _ = hybrid_loss(PixelProbs(p, g), cfg)
    assert value == weighted_bce(PixelProbs(p, g), resolve_lesion_weight(g.astype(np.float64), cfg))


@given(prob_maps, masks)
def test_hybrid_is_sum_of_parts(p, g):
    cfg = LossConfig(kappa=0.7)
    parts = hybrid_loss_components(PixelProbs(p, g), cfg)
    value, _ = hybrid_loss(PixelProbs(p, g), cfg)
    assert value == pytest.approx(parts["wbce"] + 0.7 * parts["ftl"], rel=1e-12)


@given(prob_maps, masks)
def test_loss_ranges(p, g):
    probs = PixelProbs(p, g)
    ti = tversky_index(probs)
    assert 0.0 <= ti <= 1.0 + 1e-12
    assert 0.0 <= focal_tversky_loss(probs, LossConfig()) <= 1.0
    assert weighted_bce(probs, 3.0) >= 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hybrid_gradient_matches_central_difference(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.05, 0.95, (4, 4))
    g = (rng.random((4, 4)) < 0.4).astype(np.float64)
    cfg = LossConfig()
    _, grad = hybrid_loss(PixelProbs(p, g), cfg)
    h = 1e-6
    for idx in [(0, 0), (1, 2), (3, 3)]:
        up, down = p.copy(), p.copy()
        up[idx] += h
        down[idx] -= h
        num = (hybrid_loss(PixelProbs(up, g), cfg)[0] - hybrid_loss(PixelProbs(down, g), cfg)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_perfect_prediction_has_zero_focal_term():
    g = np.zeros((8, 8))
    g[2:4, 2:5] = 1
    assert focal_tversky_loss(PixelProbs(g, g), LossConfig()) == 0.0
    assert tversky_index(PixelProbs(np.zeros(4), np.zeros(4)), smooth=0.0) == 1.0


def test_lesion_weight_modes():
    g = np.zeros(100)
    g[:4] = 1
    assert resolve_lesion_weight(g, LossConfig()) == 24.0
    g[:60] = 1
    assert resolve_lesion_weight(g, LossConfig()) == 1.0
    assert resolve_lesion_weight(g, LossConfig(lesion_weight_mode="fixed", lesion_weight=5.0)) == 5.0


def test_lesion_weight_raises_loss_on_missed_lesion():
    g = np.array([1.0, 0.0, 0.0, 0.0])
    p = np.array([0.2, 0.2, 0.2, 0.2])
    assert weighted_bce(PixelProbs(p, g), 3.0) > weighted_bce(PixelProbs(p, g), 1.0)


def test_config_validation_messages():
    problems = LossConfig(gamma=0.5, kappa=-1, smooth=0, lesion_weight_mode="x", lesion_weight=0.5).validate()
    assert len(problems) == 5
    assert LossConfig().validate() == []


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        PixelProbs(np.zeros(3), np.zeros(4))


def test_weighted_bce_hand_value():
    probs = PixelProbs(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert weighted_bce(probs, 3.0) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_gamma_one_is_linear_tversky_loss(rng):
    p = rng.uniform(0, 1, (8, 8))
    g = (rng.random((8, 8)) < 0.3).astype(float)
    probs = PixelProbs(p, g)
    assert focal_tversky_loss(probs, LossConfig(gamma=1.0)) == pytest.approx(1 - tversky_index(probs))


@given(prob_maps, masks, st.integers(0, 35), st.floats(0.0, 1.0))
def test_raising_lesion_probability_never_increases_loss(p, g, idx, bump):
    i = np.unravel_index(idx, g.shape)
    if not g[i]:
        g = g.copy()
        g[i] = 1
    q = p.copy()
    q[i] = min(1.0, p[i] + bump)
    cfg = LossConfig()
    assert hybrid_loss(PixelProbs(q, g), cfg)[0] <= hybrid_loss(PixelProbs(p, g), cfg)[0] + 1e-12


def test_larger_beta_penalises_misses_more():
    # one hit, one false alarm, three misses
    probs = PixelProbs(np.array([1.0, 1.0, 0.0, 0.0, 0.0]), np.array([1.0, 0.0, 1.0, 1.0, 1.0]))
    low = 1 - tversky_index(probs, 0.7, 0.3, smooth=0.0)
    high = 1 - tversky_index(probs, 0.3, 0.7, smooth=0.0)
    assert high > low
