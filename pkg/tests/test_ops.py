import itertools
import math

import numpy as np
import pytest

from akid import ops
from akid.gradcheck import check_gradient, relative_error
from akid.rng import Pcg32
from akid.tensor import ShapeError, Tensor, precision

import gradcases


def naive_conv(x, k, b, strides, padding):
    """Direct loop cross-correlation, independent of the im2col kernel."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    sh, sw = strides
    if padding == "SAME":
        ho, wo = math.ceil(h / sh), math.ceil(w / sw)
        ph = max((ho - 1) * sh + kh - h, 0)
        pw = max((wo - 1) * sw + kw - w, 0)
        top, left = ph // 2, pw // 2
    else:
        ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        top = left = 0
    out = np.zeros((n, ho, wo, cout))
    for b_, i, j, o in itertools.product(range(n), range(ho), range(wo), range(cout)):
        acc = b[o]
        for di, dj, c in itertools.product(range(kh), range(kw), range(cin)):
            y, xx = i * sh + di - top, j * sw + dj - left
            if 0 <= y < h and 0 <= xx < w:
                acc += x[b_, y, xx, c] * k[di, dj, c, o]
        out[b_, i, j, o] = acc
    return out


@pytest.mark.parametrize("h", range(1, 8))
def test_output_size_rules_exhaustive(h):
    for k, s in itertools.product(range(1, 8), range(1, 8)):
        out, lead, trail = ops.output_size(h, k, s, ops.SAME)
        assert out == math.ceil(h / s)
        assert lead + trail == max((out - 1) * s + k - h, 0)
        assert lead == (lead + trail) // 2
        if k > h:
            with pytest.raises(ShapeError):
                ops.output_size(h, k, s, ops.VALID)
        else:
            assert ops.output_size(h, k, s, ops.VALID) == ((h - k) // s + 1, 0, 0)


@pytest.mark.parametrize("seed", range(12))
def test_conv_matches_direct_loop(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, int(r.integers(3, 8)), int(r.integers(3, 8)), int(r.integers(1, 4))))
    k = r.normal(size=(int(r.integers(1, 4)), int(r.integers(1, 4)), x.shape[3], 2))
    b = r.normal(size=2)
    strides = (int(r.integers(1, 3)), int(r.integers(1, 3)))
    padding = "SAME" if seed % 2 else "VALID"
    with precision(np.float64):
        got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), strides, padding).data
    np.testing.assert_allclose(got, naive_conv(x, k, b, strides, padding), rtol=1e-12, atol=1e-12)


def test_conv_is_cross_correlation():
    x = np.arange(9, dtype=float).reshape(1, 3, 3, 1)
    k = np.zeros((2, 2, 1, 1))
    k[0, 0] = 1.0  # picks the top-left of each window
    out = ops.conv2d(x, k, np.zeros(1), (1, 1), "VALID").data[0, :, :, 0]
    assert out.tolist() == [[0, 1], [3, 4]]


def test_conv_channel_mismatch_names_axis():
    with pytest.raises(ShapeError, match="axis"):
        ops.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 1, 4)), np.zeros(4))


def test_maxpool_example():
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    out = ops.maxpool2d(x, (2, 2), (2, 2), "VALID").data[0, :, :, 0]
    assert out.tolist() == [[5, 7], [13, 15]]


def test_maxpool_ties_route_gradient_to_first_cell():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    from akid.tensor import Tape

    with Tape() as tape:
        y, arg = ops.maxpool2d(x, (2, 2), (2, 2), "VALID", return_argmax=True)
        s = ops.sum_all(y)
    (g,) = tape.gradient(s, [x])
    assert arg.ravel().tolist() == [0]
    assert g[0, :, :, 0].tolist() == [[1, 0], [0, 0]]


def test_maxpool_same_padding_never_selects_pad():
    x = -np.ones((1, 3, 3, 1))
    out = ops.maxpool2d(x, (2, 2), (2, 2), "SAME").data
    assert out.shape == (1, 2, 2, 1)
    assert np.all(out == -1)


def test_maxout_groups_consecutive_channels():
    x = np.array([[1.0, 4.0, 2.0, 3.0, -1.0, -2.0]])
    assert ops.maxout(x, 2).data.tolist() == [[4.0, 3.0, -1.0]]
    with pytest.raises(ValueError):
        ops.maxout(x, 4)


def test_inner_product_flattens():
    x = np.ones((2, 2, 3, 1))
    w = np.ones((6, 4))
    out = ops.inner_product(x, w, np.arange(4.0)).data
    assert out.tolist() == [[6, 7, 8, 9]] * 2
    with pytest.raises(ShapeError, match="axis 1"):
        ops.inner_product(x, np.ones((5, 4)), np.zeros(4))


def test_batch_norm_statistics_and_running_update():
    r = np.random.default_rng(0)
    x = r.normal(3.0, 2.0, size=(16, 2, 2, 3))
    with precision(np.float64):
        y, m, v = ops.batch_norm(x, np.ones(3), np.zeros(3), 1e-5, "train", np.zeros(3), np.ones(3), 0.99)
    yd = y.data.reshape(-1, 3)
    np.testing.assert_allclose(yd.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(yd.var(0), 1, atol=1e-4)
    flat = x.reshape(-1, 3)
    np.testing.assert_allclose(m, 0.01 * flat.mean(0), rtol=1e-12)
    np.testing.assert_allclose(v, 0.99 + 0.01 * flat.var(0), rtol=1e-12)


def test_batch_norm_inference_uses_running_stats():
    x = np.full((2, 1, 1, 2), 5.0)
    y, m, v = ops.batch_norm(x, np.ones(2), np.zeros(2), 0.0, "inference", np.array([1.0, 5.0]), np.array([4.0, 1.0]))
    assert y.data.ravel().tolist() == [2.0, 0.0, 2.0, 0.0]
    assert m.tolist() == [1.0, 5.0]


def test_dropout_inverted_and_identity_at_inference():
    x = np.ones((200, 50))
    y = ops.dropout(x, 0.5, "train", Pcg32(1)).data
    assert set(np.unique(y).tolist()) == {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    assert ops.dropout(Tensor(x), 0.5, "inference").data is not None
    np.testing.assert_array_equal(ops.dropout(x, 0.5, "inference").data, x)
    with pytest.raises(ValueError):
        ops.dropout(x, 0.0, "train", Pcg32(1))


def test_softmax_cross_entropy_value_and_stability():
    logits = np.array([[1000.0, 0.0], [0.0, 0.0]])
    loss, pred, acc = ops.softmax_cross_entropy(logits, np.array([0, 1]))
    assert math.isfinite(loss.item())
    np.testing.assert_allclose(loss.item(), math.log(2) / 2, rtol=1e-6)
    assert pred.tolist() == [0, 0] and acc == 0.5
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(logits, np.array([0]))


def test_uniform_logits_give_log_k():
    loss, _, _ = ops.softmax_cross_entropy(np.zeros((4, 10)), np.array([0, 3, 5, 9]))
    np.testing.assert_allclose(loss.item(), math.log(10), rtol=1e-6)


def test_add_requires_equal_shapes():
    with pytest.raises(ShapeError):
        ops.add(np.zeros(3), np.zeros(4))


def test_l2_loss_value():
    assert ops.l2_loss(np.array([1.0, 2.0]), 0.5).item() == pytest.approx(2.5)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(1e-2)
    assert relative_error(np.array([2.0]), np.array([2.0])) == 0.0


@pytest.mark.parametrize("kind", sorted(gradcases.CASES))
def test_gradients_match_finite_differences(kind):
    for i in range(gradcases.NUM_CASES):
        fn, points = gradcases.CASES[kind](np.random.default_rng(1000 + i))
        assert check_gradient(fn, points) <= gradcases.TOLERANCE, f"{kind} case {i}"
