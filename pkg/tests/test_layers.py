import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import calibrate_model, dense_as_luts, grad_rel_errors
from lutforge.fxp import RND, SAT, TRN, WRAP, FxpFormat, QuantizerState
from lutforge.layers import (Flatten, LayerError, LutConv, LutDense, QDense, Sequential, _act_grad,
                             conv_index_map)


def fixed(shape, fmt, mode, rounding):
    fmts = np.empty(shape, dtype=object)
    for idx in np.ndindex(*shape):
        fmts[idx] = fmt
    return QuantizerState.from_formats(fmts, mode, rounding)


def float_stack(rng, bn=False):
    model = Sequential([LutDense(4, 4, rng=rng, use_batchnorm=bn), LutDense(4, 4, rng=rng)], (4,))
    model.set_quantizers_enabled(False)
    for layer in model.layers:
        for b in layer.B:
            b[...] = rng.normal(0, 0.3, b.shape)
    return model


def test_zero_parameters_give_zero_output():
    layer = LutDense(3, 2)
    for a in layer.W + layer.B:
        a[...] = 0.0
    x = np.random.default_rng(1).normal(size=(5, 3))
    calibrate_model(Sequential([layer], (3,)), x)
    assert np.all(layer.forward(x) == 0.0)


def test_single_llut_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    fin, fout = FxpFormat(True, 2, 3), FxpFormat(True, 1, 4)
    layer = LutDense(1, 1, hidden=(3,), rng=rng, q_in=fixed((1, 1), fin, WRAP, TRN),
                     q_out=fixed((1, 1), fout, SAT, RND))
    layer.B[0][...] = rng.normal(size=layer.B[0].shape)
    layer.B[1][...] = 0.25
    w0, b0 = layer.W[0][0, 0, 0], layer.B[0][0, 0]
    w1, b1 = layer.W[1][0, 0], layer.B[1][0, 0]
    xs = rng.uniform(-6, 6, 200)
    got = layer.forward(xs[:, None])[:, 0]
    for x, y in zip(xs, got):
        xq = oracles.quantize(x, True, 2, 3, "WRAP", "TRN")
        want = oracles.quantize(oracles.llut(xq, w0, b0, w1, b1), True, 1, 4, "SAT", "RND")
        assert y == want


def test_dense_layer_recovery():
    rng = np.random.default_rng(3)
    w, b = rng.normal(size=(8, 8)), rng.normal(size=8)
    layer = dense_as_luts(w, b)
    x = rng.normal(size=(1000, 8))
    err = np.abs(layer.forward(x) - (np.maximum(x, 0) @ w + b)).max()
    assert err <= 1e-6


def test_index_map_1d_example():
    out, idx = conv_index_map((4,), (3,), (1,), "valid")
    assert out == (2,)
    assert idx.tolist() == [[0, 1, 2], [1, 2, 3]]


def test_index_map_same_padding_marks_outside():
    out, idx = conv_index_map((3,), (3,), (1,), "same")
    assert out == (3,)
    assert idx.tolist() == [[-1, 0, 1], [0, 1, 2], [1, 2, -1]]


def test_index_map_2d_stride():
    out, idx = conv_index_map((4, 4), (2, 2), (2, 2), "valid")
    assert out == (2, 2)
    assert idx[1, 1].tolist() == [10, 11, 14, 15]


def test_kernel_one_conv_equals_pointwise_dense():
    rng = np.random.default_rng(4)
    conv = LutConv(3, 2, 1, rng=np.random.default_rng(5))
    dense = LutDense(3, 2, rng=np.random.default_rng(5))
    x = rng.normal(size=(6, 5, 3))
    a = conv.forward(x, training=True)
    b = dense.forward(x, training=True)
    assert np.array_equal(a, b)
    assert np.array_equal(conv.forward(x), dense.forward(x))


def test_conv_with_zero_inner_layer_is_zero():
    conv = LutConv(2, 3, (2, 2), padding="same")
    for a in conv.inner.W + conv.inner.B:
        a[...] = 0.0
    x = np.random.default_rng(6).normal(size=(2, 4, 4, 2))
    assert conv.forward(x, training=True).shape == (2, 4, 4, 3)
    assert np.all(conv.forward(x) == 0.0)


def test_qdense_quantized_matmul():
    layer = QDense(2, 1)
    layer.weights[...] = [[0.3], [-1.6]]
    layer.bias[...] = [0.7]
    layer.q_act = fixed((2,), FxpFormat(True, 2, 1), SAT, TRN)
    layer.q_w = fixed((2, 1), FxpFormat(True, 1, 1), SAT, RND)
    layer.q_b = fixed((1,), FxpFormat(False, 1, 1), SAT, RND)
    y = layer.forward(np.array([[1.3, 5.0]]))
    # x -> [1.0, 3.5], w -> [0.5, -1.5], b -> 0.5
    assert y.tolist() == [[1.0 * 0.5 + 3.5 * -1.5 + 0.5]]


def test_qdense_unquantized_is_plain_matmul():
    rng = np.random.default_rng(7)
    layer = QDense(3, 2, rng=rng, quantized=False)
    x = rng.normal(size=(4, 3))
    assert np.allclose(layer.forward(x), x @ layer.weights + layer.bias)


def test_eval_requires_calibration():
    with pytest.raises(LayerError):
        LutDense(2, 2).forward(np.zeros((1, 2)))


def test_shape_mismatch_is_reported():
    with pytest.raises(LayerError):
        Sequential([LutDense(3, 2)], (4,))


@pytest.mark.parametrize("bn", [False, True])
def test_gradients_match_finite_differences(bn):
    rng = np.random.default_rng(8)
    for _ in range(5):
        model = float_stack(rng, bn)
        x = rng.normal(size=(6, 4))
        r = rng.normal(size=(6, 4))
        # batch norm cancels the pre-norm bias, so its true gradient is 0 and
        # the difference quotient is pure roundoff; a larger floor absorbs that
        errs = grad_rel_errors(model, x, r, floor=1e-5 if bn else 1e-7)
        assert max(errs.values()) < 1e-3, errs


def test_conv_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    model = Sequential([LutConv(1, 2, 3, stride=2, padding="same", rng=rng), Flatten()], (7, 1))
    model.set_quantizers_enabled(False)
    x = rng.normal(size=(2, 7, 1))
    r = rng.normal(size=(2, 8))
    model.forward(x, training=True)
    gx = model.backward(r)
    eps = 1e-6
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (np.sum(model.forward(xp, training=True) * r)
              - np.sum(model.forward(xm, training=True) * r)) / (2 * eps)
        assert gx[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(10)
    model = Sequential([LutDense(3, 4, rng=rng), LutDense(4, 2, rng=rng)], (3,))
    model.forward(rng.normal(size=(5, 3)), training=True)
    gx = model.backward(np.zeros((5, 2)))
    assert np.all(gx == 0.0)
    assert all(np.all(g == 0.0) for g in model.named_grads().values())


def test_tanh_derivative_at_zero():
    z = np.zeros(1)
    assert _act_grad("tanh", z, np.tanh(z))[0] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.permutations(range(4)))
def test_input_permutation_equivariance(seed, perm):
    rng = np.random.default_rng(seed)
    layer = LutDense(4, 3, rng=rng)
    x = rng.normal(size=(8, 4))
    calibrate_model(Sequential([layer], (4,)), x)
    y = layer.forward(x)
    perm = list(perm)
    permuted = LutDense(4, 3)
    for src, dst in zip(layer.W + layer.B, permuted.W + permuted.B):
        dst[...] = src[perm]
    permuted.q_in = fixed((4, 3), FxpFormat(False, 0, 0), WRAP, TRN)
    permuted.q_out = fixed((4, 3), FxpFormat(False, 0, 0), SAT, RND)
    for name in ("q_in", "q_out"):
        q_src, q_dst = getattr(layer, name), getattr(permuted, name)
        q_dst.f_raw[...] = q_src.f_raw[perm]
        q_dst.i_cal[...] = q_src.i_cal[perm]
        q_dst.signed[...] = q_src.signed[perm]
    assert np.allclose(permuted.forward(x[:, perm]), y, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_output_is_sum_of_single_input_contributions(seed):
    rng = np.random.default_rng(seed)
    layer = LutDense(3, 2, rng=rng)
    x = rng.normal(size=(6, 3))
    calibrate_model(Sequential([layer], (3,)), x)
    total = layer.forward(x)
    parts = np.zeros_like(total)
    for i in range(3):
        sub = LutDense(1, 2)
        for src, dst in zip(layer.W + layer.B, sub.W + sub.B):
            dst[...] = src[i:i + 1]
        for name in ("q_in", "q_out"):
            q_src = getattr(layer, name)
            q = QuantizerState((1, 2), q_src.mode, q_src.rounding, calibrated=True)
            q.f_raw[...], q.i_cal[...], q.signed[...] = (q_src.f_raw[i:i + 1], q_src.i_cal[i:i + 1],
                                                          q_src.signed[i:i + 1])
            setattr(sub, name, q)
        parts += sub.forward(x[:, i:i + 1])
    assert np.allclose(parts, total, rtol=0, atol=1e-12)


def test_eval_is_deterministic_and_batch_independent():
    rng = np.random.default_rng(11)
    model = Sequential([LutDense(4, 5, rng=rng, use_batchnorm=True), LutDense(5, 2, rng=rng)], (4,))
    x = rng.normal(size=(32, 4))
    calibrate_model(model, x)
    full = model.forward(x)
    assert np.array_equal(full, model.forward(x))
    rows = np.concatenate([model.forward(x[k:k + 1]) for k in range(32)])
    assert np.array_equal(full, rows)


def test_qdense_identity_weights_pass_quantized_input():
    layer = QDense(3, 3)
    layer.weights[...] = np.eye(3)
    layer.bias[...] = 0.0
    layer.q_act = fixed((3,), FxpFormat(True, 2, 2), SAT, TRN)
    layer.q_w = fixed((3, 3), FxpFormat(False, 1, 0), SAT, RND)
    layer.q_b = fixed((3,), FxpFormat(False, 1, 0), SAT, RND)
    x = np.array([[0.3, -1.9, 7.0]])
    assert layer.forward(x).tolist() == [[0.25, -2.0, 3.75]]


def test_qdense_zero_weights_broadcast_bias():
    layer = QDense(2, 3)
    layer.weights[...] = 0.0
    layer.bias[...] = [0.5, -1.0, 2.0]
    x = np.random.default_rng(12).normal(size=(4, 2))
    layer.forward(x, training=True)
    assert np.array_equal(layer.forward(x), np.tile([0.5, -1.0, 2.0], (4, 1)))


def test_qdense_fine_quantization_matches_float():
    rng = np.random.default_rng(13)
    layer = QDense(2, 2, rng=rng)
    layer.bias[...] = rng.normal(size=2)
    x = rng.normal(size=(50, 2))
    layer.forward(x, training=True)
    for q in layer.quantizers().values():
        q.f_raw[...] = 12.0
    err = np.abs(layer.forward(x) - (x @ layer.weights + layer.bias)).max()
    assert err <= 1e-3  # 12 fractional bits: each operand is within 2^-13
    for q in layer.quantizers().values():
        q.enabled = False
    assert np.abs(layer.forward(x) - (x @ layer.weights + layer.bias)).max() <= 1e-6
