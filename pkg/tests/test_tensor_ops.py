import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from glogseg import ops
from glogseg.tensor import Tape, Tensor, backward, no_grad
from conftest import max_rel, numeric_grad


def _grad(build, *tensors):
    with Tape() as tape:
        loss = build()
    backward(tape, loss, reset=True)
    return [t.grad for t in tensors]


def test_sum_grad_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    (g,) = _grad(lambda: ops.sum(x), x)
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_sum_of_squares_grad():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (g,) = _grad(lambda: ops.sum(ops.mul(x, x)), x)
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_grads_accumulate_without_reset():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum(x)
        backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_nonscalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.scale(x, 2.0)
    with pytest.raises(ValueError):
        backward(tape, y)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.sum(x)
    assert not tape.nodes


def test_nonfinite_output_raises():
    with pytest.raises(FloatingPointError):
        ops.scale(Tensor(np.array([np.inf])), 1.0)


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(1, 9, 7))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(img), Tensor(k)).data, img)


def test_conv_zero_kernel():
    img = np.random.default_rng(1).normal(size=(1, 5, 5))
    out = ops.conv2d(Tensor(img), Tensor(np.zeros((2, 1, 3, 3)))).data
    assert out.shape == (2, 5, 5) and not out.any()


def test_conv_hand_sum_center():
    img = np.arange(1.0, 10.0).reshape(1, 3, 3)
    out = ops.conv2d(Tensor(img), Tensor(np.ones((1, 1, 3, 3)))).data
    assert out[0, 1, 1] == 45.0


def test_conv_is_cross_correlation_against_loops():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 6, 5))
    for o in range(3):
        for i in range(6):
            for j in range(5):
                ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * k[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_even_kernel_needs_explicit_padding():
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


def test_gelu_values():
    x = Tensor(np.array([0.0, 10.0, 1.0]))
    y = ops.gelu(x).data
    assert y[0] == 0.0
    assert abs(y[1] - 10.0) < 1e-9
    assert abs(y[2] - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15
    assert abs(y[2] - 0.8413447460685429) < 1e-12


def test_layer_norm_cases():
    def ln(vals, gain, bias, eps=1e-5):
        x = Tensor(np.asarray(vals, float).reshape(-1, 1, 1))
        c = x.shape[0]
        return ops.layer_norm(x, Tensor(np.full(c, gain)), Tensor(np.full(c, bias)), eps=eps).data.ravel()

    np.testing.assert_array_equal(ln([3.0, 3.0, 3.0], 1, 0), 0.0)
    np.testing.assert_allclose(ln([1.0, 3.0], 1, 0, eps=1e-14), [-1.0, 1.0], atol=1e-12)
    v = np.array([0.0, 1.0, 2.0])
    ref = 2 * (v - v.mean()) / np.sqrt(v.var() + 1e-5) + 1
    np.testing.assert_allclose(ln(v, 2, 1), ref, atol=1e-14)


def test_concat_channels():
    a = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    assert ops.concat_channels([a]).data.shape == (1, 2, 2)
    b = Tensor(np.full((1, 2, 2), 2.0), requires_grad=True)
    out = ops.concat_channels([a, b]).data
    assert out.shape == (2, 2, 2) and out[0, 0, 0] == 1 and out[1, 0, 0] == 2
    w = np.random.default_rng(3).normal(size=(2, 2, 2))
    ga, gb = _grad(lambda: ops.sum(ops.mul(ops.concat_channels([a, b]), Tensor(w))), a, b)
    np.testing.assert_allclose(ga, w[:1], atol=1e-12)
    np.testing.assert_allclose(gb, w[1:], atol=1e-12)
    with pytest.raises(ValueError):
        ops.concat_channels([a, Tensor(np.ones((1, 3, 2)))])


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(4).normal(size=(5, 7)) * 30)
    np.testing.assert_allclose(ops.softmax(x).data.sum(-1), 1.0, atol=1e-12)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4, 4)))
    labels = np.random.default_rng(5).integers(0, 3, size=(4, 4))
    assert abs(ops.softmax_cross_entropy(logits, labels).item() - math.log(3)) < 1e-12


def test_dice_loss_perfect_logits_near_zero():
    labels = np.random.default_rng(6).integers(0, 3, size=(8, 8))
    logits = Tensor(60.0 * (np.arange(3)[:, None, None] == labels))
    assert ops.dice_loss(logits, labels).item() < 1e-6


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
    g = Tensor(1 + 0.1 * rng.normal(size=3), requires_grad=True)
    b = Tensor(0.1 * rng.normal(size=3), requires_grad=True)
    proj = rng.normal(size=(3, 5, 5))
    # near-constant channel vectors make layer norm so curved that step-1e-4
    # differences carry O(h^2 f''') truncation error above 1e-5
    with no_grad():
        pre = ops.gelu(ops.conv2d(x, k)).data
    assume(pre.var(axis=0).min() > 1e-3)

    def build():
        y = ops.gelu(ops.conv2d(x, k))
        y = ops.layer_norm(y, g, b)
        return ops.sum(ops.mul(ops.softmax(y, axis=0), Tensor(proj)))

    analytic = _grad(build, x, k, g, b)
    for t, a in zip((x, k, g, b), analytic):
        num = numeric_grad(lambda: build().item(), t.data)
        assert max_rel(a, num) < 1e-5
