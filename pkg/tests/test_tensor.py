import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_conv2d
from lesionseg import tensor as T
from lesionseg.tensor import GradTape, ParameterError, RunningStats, ShapeError, Tensor


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (1, 4), (2, 2), (1, 8)])
def test_conv2d_exact_on_integers(stride, dilation):
    rng = np.random.default_rng(stride * 10 + dilation)
    x = rng.integers(-4, 5, (2, 3, 9, 7)).astype(np.float64)
    w = rng.integers(-3, 4, (4, 3, 3, 3)).astype(np.float64)
    b = rng.integers(-2, 3, 4).astype(np.float64)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, dilation=dilation).data
    np.testing.assert_array_equal(out, naive_conv2d(x, w, b, stride, dilation))


def test_conv2d_matches_oracle_on_reals(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, dilation=2).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, None, 2, 2), atol=1e-6)


def test_conv2d_float32_tolerance(rng):
    x = rng.standard_normal((2, 4, 16, 16)).astype(np.float32)
    w = rng.standard_normal((5, 4, 3, 3)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w)).data
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, naive_conv2d(x.astype(np.float64), w.astype(np.float64)), atol=1e-4)


def test_conv2d_one_by_one_stride_two_subsamples(rng):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((3, 2, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2).data
    np.testing.assert_allclose(out, np.einsum("oc,nchw->nohw", w[:, :, 0, 0], x[:, :, ::2, ::2]), atol=1e-12)


@given(size=st.integers(1, 40), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 3), dilation=st.integers(1, 8))
def test_same_padding_output_is_ceil(size, k, stride, dilation):
    out, before, after = T.conv_output_size(size, k, stride, dilation, "same")
    assert out == -(-size // stride)
    assert 0 <= after - before <= 1


def test_conv2d_rejects_bad_arguments(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        T.conv2d(x, Tensor(rng.standard_normal((1, 3, 3, 3))))
    with pytest.raises(ParameterError):
        T.conv2d(x, Tensor(rng.standard_normal((1, 2, 3, 3))), stride=0)
    with pytest.raises(ParameterError):
        T.conv2d(x, Tensor(rng.standard_normal((1, 2, 3, 3))), dilation=0)


def test_batch_norm_train_normalises_and_updates_stats(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    stats = RunningStats.fresh(3)
    out = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, mode="train").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-6)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-6)


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    stats = RunningStats(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    scale, shift = np.array([2.0, 0.5]), np.array([0.1, -0.2])
    out = T.batch_norm(Tensor(x), Tensor(scale), Tensor(shift), stats, mode="eval").data
    expect = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + 1e-5)
    expect = expect * scale[None, :, None, None] + shift[None, :, None, None]
    np.testing.assert_allclose(out, expect, atol=1e-6)
    np.testing.assert_array_equal(stats.mean, [1.0, -1.0])


def test_sigmoid_is_stable_at_extremes():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-6)
    assert 0.0 < out.min() and out.max() < 1.0


def test_upsample_concat_add_shapes(rng):
    a = rng.standard_normal((1, 2, 3, 4))
    up = T.upsample2x(Tensor(a)).data
    assert up.shape == (1, 2, 6, 8)
    np.testing.assert_array_equal(up[:, :, ::2, ::2], a)
    np.testing.assert_array_equal(up[:, :, 1::2, 1::2], a)
    cat = T.concat_channels(Tensor(a), Tensor(a * 2)).data
    assert cat.shape == (1, 4, 3, 4)
    with pytest.raises(ShapeError):
        T.concat_channels(Tensor(a), Tensor(rng.standard_normal((1, 2, 3, 5))))
    with pytest.raises(ShapeError):
        T.add(Tensor(a), Tensor(rng.standard_normal((1, 2, 3, 5))))


def test_tape_accumulates_reused_inputs():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with GradTape() as tape:
        y = T.sum_all(T.add(x, T.scale(x, 3.0)))
    (g,) = tape.gradient(y, [x])
    np.testing.assert_allclose(g, [4.0, 4.0, 4.0])


def test_unreached_source_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        y = T.sum_all(T.relu(x))
    gx, gz = tape.gradient(y, [x, z])
    np.testing.assert_array_equal(gz, np.zeros(2))
    np.testing.assert_array_equal(gx, np.ones(3))


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        pass
    T.relu(x)
    assert T.active_tape() is None
    assert not tape.nodes


def test_sum_of_squares_empty_is_zero():
    assert float(T.sum_of_squares([], 0.5).data) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv_backward_is_adjoint_of_forward(seed):
    # <conv(x), g> == <x, conv^T(g)> for every x, g
    rng = np.random.default_rng(seed)
    stride, dilation = int(rng.integers(1, 3)), int(rng.choice([1, 2, 4]))
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    with GradTape() as tape:
        y = T.conv2d(x, w, stride=stride, dilation=dilation)
        g = rng.standard_normal(y.shape)
        s = T.weighted_sum(y, g)
    (gx,) = tape.gradient(s, [x])
    assert np.isclose(np.sum(y.data * g), np.sum(x.data * gx), rtol=1e-9, atol=1e-9)
