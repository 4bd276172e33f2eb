import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from lutforge.estimator import (DEFAULT_SPEC, LutPrimitiveSpec, ebops_llut, ebops_model,
                                estimate_luts, per_layer_ebops)
from lutforge.fxp import RND, SAT, TRN, WRAP, FxpFormat, QuantizerState
from lutforge.layers import LutConv, LutDense, QDense, Sequential


def fixed(shape, fmt, mode, rounding):
    fmts = np.empty(shape, dtype=object)
    for idx in np.ndindex(*shape):
        fmts[idx] = fmt
    return QuantizerState.from_formats(fmts, mode, rounding)


@pytest.mark.parametrize("m, n, want", [(8, 4, 16.0), (3, 4, 1.2), (0, 7, 0.0)])
def test_ebops_examples(m, n, want):
    assert ebops_llut(m, n) == pytest.approx(want, rel=0, abs=1e-12)


def test_ebops_grid_matches_oracle():
    for m in range(11):
        for n in range(9):
            assert ebops_llut(m, n) == pytest.approx(oracles.ebops_llut(m, n), rel=1e-15, abs=0)


def test_branches_meet_at_y():
    spec = DEFAULT_SPEC
    for n in range(9):
        big = 2.0 ** (spec.y - spec.x) * n
        small = spec.y / spec.y * 2.0 ** (spec.y - spec.x) * n
        assert big == small == ebops_llut(spec.y, n)


def test_primitive_spec_validation():
    with pytest.raises(ValueError):
        LutPrimitiveSpec(4, 5)
    assert ebops_llut(7, 1, LutPrimitiveSpec(4, 2)) == 8.0


def test_two_by_two_model():
    layer = LutDense(2, 2, q_in=fixed((2, 2), FxpFormat(False, 6, 0), WRAP, TRN),
                     q_out=fixed((2, 2), FxpFormat(False, 2, 0), SAT, RND))
    assert ebops_model(Sequential([layer], (2,))) == 8.0


def test_fully_pruned_model_is_zero():
    layer = LutDense(3, 2, q_in=fixed((3, 2), FxpFormat(False, 4, 0), WRAP, TRN),
                     q_out=fixed((3, 2), FxpFormat(False, 0, 0), SAT, RND))
    assert ebops_model(Sequential([layer], (3,))) == 0.0


def test_model_total_is_sum_of_llut_terms():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c_in, c_out = rng.integers(1, 5, size=2)
        fin = np.empty((c_in, c_out), dtype=object)
        fout = np.empty((c_in, c_out), dtype=object)
        want = 0.0
        for idx in np.ndindex(c_in, c_out):
            m, n = rng.integers(0, 9, size=2)
            fin[idx] = FxpFormat(False, int(m), 0)
            fout[idx] = FxpFormat(True, int(n) - 1, 0)
            want += oracles.ebops_llut(int(m), int(n))
        layer = LutDense(int(c_in), int(c_out), q_in=QuantizerState.from_formats(fin, WRAP, TRN),
                         q_out=QuantizerState.from_formats(fout, SAT, RND))
        assert ebops_model(Sequential([layer], (int(c_in),))) == pytest.approx(want, rel=1e-12)


def test_conv_counts_every_output_position():
    conv = LutConv(1, 2, 3, q_in=fixed((3, 2), FxpFormat(False, 5, 0), WRAP, TRN),
                   q_out=fixed((3, 2), FxpFormat(False, 3, 0), SAT, RND))
    model = Sequential([conv], (10, 1))
    assert ebops_model(model) == 8 * 6 * oracles.ebops_llut(5, 3)


def test_qdense_bit_products():
    layer = QDense(3, 2)
    layer.q_act = fixed((3,), FxpFormat(False, 2, 1), SAT, TRN)
    layer.q_w = fixed((3, 2), FxpFormat(True, 1, 2), SAT, RND)
    layer.q_b = fixed((2,), FxpFormat(True, 1, 2), SAT, RND)
    model = Sequential([layer, LutDense(2, 1)], (3,))
    model.layers[1].q_in.enabled = False
    assert per_layer_ebops(model) == [3 * 2 * 3 * 4, 0.0]


@pytest.mark.parametrize("ebops, want", [(1.0, 1.0), (1000.0, math.exp(0.985 * math.log(1000))),
                                         (0.0, 0.0), (-3.0, 0.0)])
def test_estimate_luts(ebops, want):
    assert estimate_luts(ebops) == pytest.approx(want, rel=1e-12)
    if ebops == 1000.0:
        assert estimate_luts(ebops) == pytest.approx(901.6, abs=0.05)


@given(st.floats(1e-6, 1e9), st.floats(1e-6, 1e9))
def test_estimate_luts_monotone(a, b):
    lo, hi = sorted((a, b))
    assert estimate_luts(lo) <= estimate_luts(hi)


@given(st.floats(0, 12), st.floats(0, 12), st.floats(0, 12), st.floats(0, 12))
def test_ebops_monotone_in_both_widths(m1, m2, n1, n2):
    m_lo, m_hi = sorted((m1, m2))
    n_lo, n_hi = sorted((n1, n2))
    assert ebops_llut(m_lo, n_lo) <= ebops_llut(m_hi, n_lo) <= ebops_llut(m_hi, n_hi)


def test_raising_frac_bits_never_lowers_soft_ebops():
    rng = np.random.default_rng(1)
    model = Sequential([QDense(3, 4, rng=rng), LutDense(4, 3, rng=rng), LutDense(3, 2, rng=rng)], (3,))
    model.forward(rng.normal(size=(64, 3)), training=True)
    for q in model.named_quantizers().values():
        q.f_raw[...] = rng.uniform(-2, 8, q.f_raw.shape)
    base, grads = ebops_model(model, soft=True, with_grad=True)
    for name, g in grads.items():
        assert np.all(g >= 0), name
    eps = 1e-4
    for name, q in model.named_quantizers().items():
        for idx in np.ndindex(*q.f_raw.shape):
            q.f_raw[idx] += eps
            assert ebops_model(model, soft=True) >= base - 1e-12
            q.f_raw[idx] -= eps
