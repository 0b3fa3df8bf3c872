import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wmpredict.nn import (
    BatchNorm,
    Conv1D,
    Conv2D,
    Dropout,
    Flatten,
    Linear,
    ReLU,
    conv1d,
    conv2d,
    cross_entropy_loss,
    flatten,
    linear,
    make_rng,
    mse_loss,
    read_tensors,
    relu,
    sgd_step,
    step_decay,
    write_tensors,
)


def loop_conv1d(x, w, b):
    bsz, cin, n = x.shape
    cout, _, k = w.shape
    out = np.zeros((bsz, cout, n - k + 1))
    for i in range(bsz):
        for o in range(cout):
            for t in range(n - k + 1):
                out[i, o, t] = b[o] + sum(w[o, c, j] * x[i, c, t + j] for c in range(cin) for j in range(k))
    return out


def loop_conv2d(x, w, b, pad):
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    out = np.zeros((bsz, cout, ho, wo))
    for i in range(bsz):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    out[i, o, r, c] = b[o] + np.sum(w[o] * xp[i, :, r:r + kh, c:c + kw])
    return out


# --- conv1d ----------------------------------------------------------------


def test_conv1d_length_1516_to_1512():
    layer = Conv1D(1, 2, 5)
    assert layer.forward(np.zeros((1, 1, 1516))).shape == (1, 2, 1512)


def test_conv1d_sum_of_ones():
    out = conv1d(np.ones((1, 1, 9)), np.ones((1, 1, 5)), np.zeros(1))
    np.testing.assert_array_equal(out, np.full((1, 1, 5), 5.0))


def test_conv1d_bias_only():
    out = conv1d(make_rng(0).normal(size=(2, 3, 8)), np.zeros((4, 3, 5)), np.arange(4.0))
    np.testing.assert_array_equal(out, np.broadcast_to(np.arange(4.0)[None, :, None], (2, 4, 4)))


def test_conv1d_too_short():
    with pytest.raises(ValueError):
        Conv1D(1, 1, 5).forward(np.zeros((1, 1, 4)))


def test_conv1d_matches_loop_oracle():
    rng = make_rng(1)
    x, w, b = rng.normal(size=(2, 3, 11)), rng.normal(size=(4, 3, 5)), rng.normal(size=4)
    np.testing.assert_allclose(conv1d(x, w, b), loop_conv1d(x, w, b), rtol=0, atol=1e-12)


# --- conv2d ----------------------------------------------------------------


def test_conv2d_preserves_3x800():
    layer = Conv2D(1, 2, (3, 3), padding=1)
    assert layer.forward(np.zeros((1, 1, 3, 800))).shape == (1, 2, 3, 800)


def test_conv2d_hand_convolution():
    out = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)[0, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    assert out[0, 1] == out[1, 0] == 6


def test_conv2d_zero_input_gives_bias():
    out = conv2d(np.zeros((2, 3, 3, 5)), make_rng(0).normal(size=(2, 3, 3, 3)), np.array([1.5, -2.0]))
    np.testing.assert_array_equal(out[:, 0], 1.5)
    np.testing.assert_array_equal(out[:, 1], -2.0)


def test_conv2d_rejects_empty_spatial():
    with pytest.raises(ValueError):
        Conv2D(1, 1).forward(np.zeros((1, 1, 0, 5)))


def test_conv2d_matches_loop_oracle():
    rng = make_rng(2)
    x, w, b = rng.normal(size=(2, 2, 3, 7)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    np.testing.assert_allclose(conv2d(x, w, b, padding=1), loop_conv2d(x, w, b, 1), rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_convolutions_linear_in_input(seed, a, c):
    rng = make_rng(seed)
    w1, w2 = rng.normal(size=(3, 2, 5)), rng.normal(size=(3, 2, 3, 3))
    x1, y1 = rng.normal(size=(2, 2, 12)), rng.normal(size=(2, 2, 12))
    x2, y2 = rng.normal(size=(2, 2, 3, 6)), rng.normal(size=(2, 2, 3, 6))
    z1, z2 = np.zeros(3), np.zeros(3)
    np.testing.assert_allclose(
        conv1d(a * x1 + c * y1, w1, z1), a * conv1d(x1, w1, z1) + c * conv1d(y1, w1, z1), rtol=0, atol=1e-10
    )
    np.testing.assert_allclose(
        conv2d(a * x2 + c * y2, w2, z2), a * conv2d(x2, w2, z2) + c * conv2d(y2, w2, z2), rtol=0, atol=1e-10
    )


# --- batchnorm -------------------------------------------------------------


def test_batchnorm_constant_channel_maps_to_zero():
    x = make_rng(0).normal(size=(4, 2, 6))
    x[:, 1] = 3.7
    out = BatchNorm(2).forward(x)
    np.testing.assert_allclose(out[:, 1], 0.0, atol=1e-12)


def test_batchnorm_gamma_zero_gives_beta():
    bn = BatchNorm(3)
    bn.params["gamma"][:] = 0.0
    bn.params["beta"][:] = [1.0, -2.0, 0.5]
    out = bn.forward(make_rng(1).normal(size=(5, 3, 2, 4)))
    np.testing.assert_array_equal(out, np.broadcast_to(np.array([1.0, -2.0, 0.5])[None, :, None, None], out.shape))


@pytest.mark.parametrize("shape", [(8, 4, 10), (6, 3, 3, 7)])
def test_batchnorm_train_moments(shape):
    x = make_rng(2).normal(3.0, 5.0, size=shape)
    out = BatchNorm(shape[1]).forward(x)
    axes = (0,) + tuple(range(2, len(shape)))
    assert np.abs(out.mean(axis=axes)).max() <= 1e-6
    assert np.abs(out.var(axis=axes) - 1).max() <= 1e-3


def test_batchnorm_running_stats_and_eval():
    bn = BatchNorm(2, momentum=0.1)
    x = make_rng(3).normal(2.0, 3.0, size=(10, 2, 5))
    bn.forward(x)
    n = 50
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2)) * n / (n - 1))
    bn.training = False
    out = bn.forward(x)
    rm, rv = bn.buffers["running_mean"], bn.buffers["running_var"]
    np.testing.assert_allclose(out, (x - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5))
    np.testing.assert_array_equal(bn.forward(x), out)


def test_batchnorm_empty_batch():
    with pytest.raises(ValueError):
        BatchNorm(2).forward(np.zeros((0, 2, 3)))


# --- relu / dropout ---------------------------------------------------------


def test_relu_definition_and_backward():
    layer = ReLU()
    np.testing.assert_array_equal(layer.forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(layer.backward(np.array([5.0, 5.0, 5.0])), [0, 0, 5])
    assert not relu(-np.arange(1.0, 6.0)).any()


def test_dropout_eval_is_identity():
    x = make_rng(0).normal(size=(3, 4))
    layer = Dropout(0.7)
    layer.training = False
    assert layer.forward(x) is x


def test_dropout_rate_zero_identity_in_train():
    x = make_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(Dropout(0.0).forward(x), x)


def test_dropout_law_of_large_numbers():
    x = make_rng(5).uniform(1.0, 2.0, size=100_000)
    out = Dropout(0.5, make_rng(11)).forward(x)
    kept = np.count_nonzero(out) / x.size
    assert 0.49 <= kept <= 0.51
    assert abs(out.mean() - x.mean()) <= 0.02 * x.mean()
    np.testing.assert_array_equal(out[out != 0], 2 * x[out != 0])


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_invalid_rate(rate):
    with pytest.raises(ValueError):
        Dropout(rate)


def test_dropout_backward_uses_mask():
    layer = Dropout(0.5, make_rng(0))
    out = layer.forward(np.ones(20))
    np.testing.assert_array_equal(layer.backward(np.ones(20)), out)


# --- linear / flatten ------------------------------------------------------


def test_linear_examples():
    x = make_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(linear(x, np.eye(4), np.zeros(4)), x)
    np.testing.assert_array_equal(linear(x, np.zeros((2, 4)), np.array([1.0, 2.0])), [[1, 2]] * 3)
    np.testing.assert_array_equal(linear(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2)), [[3, 2]])


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        linear(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))
    with pytest.raises(ValueError):
        Linear(3, 2).forward(np.zeros((2, 4)))


def test_flatten_shapes():
    assert flatten(np.zeros((2, 64, 3, 800))).shape == (2, 153600)
    assert flatten(np.zeros((2, 64, 1504))).shape == (2, 96256)
    x = make_rng(0).normal(size=(2, 6))
    np.testing.assert_array_equal(flatten(flatten(x)), x)
    layer = Flatten()
    y = make_rng(1).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(layer.forward(y), y.reshape(2, 12))
    assert layer.backward(np.zeros((2, 12))).shape == (2, 3, 4)


# --- losses ------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    for t in (0, 1):
        loss, _ = cross_entropy_loss(np.zeros((1, 2)), [t])
        assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_saturated_correct():
    loss, _ = cross_entropy_loss(np.array([[20.0, -20.0]]), [0])
    assert loss < 1e-8


def test_cross_entropy_gradient_by_hand():
    _, grad = cross_entropy_loss(np.zeros((1, 2)), [0])
    np.testing.assert_allclose(grad, [[-0.5, 0.5]], atol=1e-15)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((1, 2)), [2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_cross_entropy_nonnegative(seed, c):
    rng = make_rng(seed)
    logits = rng.normal(scale=50, size=(4, c))
    loss, _ = cross_entropy_loss(logits, rng.integers(0, c, 4))
    assert loss >= 0 and math.isfinite(loss)
    uniform, _ = cross_entropy_loss(np.full((3, c), 7.0), [0, 1, 0])
    assert uniform == pytest.approx(math.log(c), abs=1e-12)


def test_mse_examples():
    assert mse_loss(np.array([[1.0], [2.0]]), [1.0, 2.0])[0] == 0
    assert mse_loss(np.array([[0.0]]), [2.0])[0] == 4
    _, grad = mse_loss(np.array([[3.0]]), [1.0])
    assert grad.tolist() == [[4.0]]
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 1)), [1.0, 2.0, 3.0])


# --- sgd ---------------------------------------------------------------------


def test_sgd_examples():
    p = [np.array(1.0)]
    sgd_step(p, [np.array(0.5)], 0.1)
    assert p[0] == pytest.approx(0.95, abs=1e-15)
    q = {"w": np.arange(3.0)}
    sgd_step(q, {"w": np.zeros(3)}, 0.1)
    assert q["w"].tolist() == [0.0, 1.0, 2.0]
    r = [np.array(0.0)]
    for _ in range(2):
        sgd_step(r, [np.array(1.0)], 0.1)
    assert r[0] == pytest.approx(-0.2, abs=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step([np.zeros(3)], [np.zeros(2)], 0.1)


def test_step_decay():
    assert step_decay(0.1, 50) == 0.1
    assert step_decay(0.1, 9, step=10) == 0.1
    assert step_decay(0.1, 10, step=10, gamma=0.5) == 0.05


# --- weight container ------------------------------------------------------


def test_weight_container_round_trip():
    rng = make_rng(0)
    tensors = {"a.weight": rng.normal(size=(2, 3, 5)), "a.bias": rng.normal(size=3), "scalar": np.array(2.5)}
    buf = io.BytesIO()
    write_tensors(tensors, buf)
    raw = buf.getvalue()
    assert raw.startswith(b"CNWT1")
    buf.seek(0)
    back = read_tensors(buf)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
        assert back[k].shape == tensors[k].shape


def test_weight_container_rejects_garbage():
    with pytest.raises(ValueError):
        read_tensors(io.BytesIO(b"NOPE!" + b"\0" * 8))
    buf = io.BytesIO()
    write_tensors({"x": np.zeros(4)}, buf)
    with pytest.raises(ValueError, match="truncated"):
        read_tensors(io.BytesIO(buf.getvalue()[:-8]))
