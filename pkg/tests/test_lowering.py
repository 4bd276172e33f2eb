import copy
from collections import Counter

import numpy as np
import pytest

import oracles
from helpers import calibrate_model, lut_path_clamps, prune_output
from lutforge import ir
from lutforge.estimator import ebops_model
from lutforge.fxp import RND, SAT, TRN, WRAP, FxpFormat, QuantizerState
from lutforge.ir import Op, interpret_batch
from lutforge.layers import Activation, LutConv, LutDense, QDense, Sequential
from lutforge.lowering import LoweringError, lower, lower_report
from lutforge.verify import verify


def fixed(shape, fmt, mode, rounding):
    fmts = np.empty(shape, dtype=object)
    for idx in np.ndindex(*shape):
        fmts[idx] = fmt
    return QuantizerState.from_formats(fmts, mode, rounding)


def small_dense(seed=0):
    rng = np.random.default_rng(seed)
    model = Sequential([LutDense(3, 4, rng=rng), LutDense(4, 2, rng=rng)], (3,))
    return calibrate_model(model, rng.normal(size=(128, 3)))


def ops(p):
    return Counter(i.op.name for i in p.instrs)


def test_fully_pruned_model_lowers_to_zero_outputs():
    model = small_dense()
    for layer in model.layers:
        for j, i in np.ndindex(layer.c_in, layer.c_out):
            prune_output(layer, j, i)
    p = lower(model)
    assert ops(p)["LLUT"] == 0 and not p.tables
    assert ops(p)["OUTPUT"] == 2
    assert interpret_batch(p, np.zeros((4, 3), dtype=np.uint64)).tolist() == [[0, 0]] * 4
    assert verify(model, p, 200).ok


def test_one_by_one_structure():
    layer = LutDense(1, 1, q_in=fixed((1, 1), FxpFormat(True, 2, 2), WRAP, TRN),
                     q_out=fixed((1, 1), FxpFormat(True, 1, 3), SAT, RND))
    layer.B[1][...] = 0.3
    p = lower(Sequential([layer], (1,)))
    assert [i.op for i in p.instrs] == [Op.INPUT, Op.BITSLICE, Op.LLUT, Op.OUTPUT]
    assert p.input_formats == [FxpFormat(True, 2, 2)]
    assert p.output_formats == [FxpFormat(True, 1, 3)]


def test_lowered_program_matches_model():
    for seed in range(3):
        model = small_dense(seed)
        assert verify(model, lower(model), 2000, seed=seed).ok


def test_lowering_is_deterministic():
    a, b = small_dense(1), small_dense(1)
    assert ir.dumps(lower(a)) == ir.dumps(lower(b))
    assert ir.dumps(lower(a)) == ir.dumps(lower(a))


def test_no_clamp_on_lut_paths():
    model = small_dense(2)
    assert lut_path_clamps(lower(model)) == []


def test_matmul_first_hybrid_needs_no_clamp():
    rng = np.random.default_rng(3)
    model = Sequential([QDense(3, 4, rng=rng), LutDense(4, 2, rng=rng)], (3,))
    calibrate_model(model, rng.normal(size=(128, 3)))
    p = lower(model)
    assert ops(p)["CLAMP"] == 0 and ops(p)["MUL_CONST"] > 0
    assert verify(model, p, 2000).ok


def test_matmul_after_luts_clamps_and_stays_exact():
    rng = np.random.default_rng(3)
    model = Sequential([LutDense(3, 4, rng=rng), QDense(4, 3, rng=rng), LutDense(3, 2, rng=rng)], (3,))
    calibrate_model(model, rng.normal(size=(128, 3)))
    q = model.layers[1].q_act
    q.i_cal[...] = 0  # narrower than the LUT sums, so the matmul input saturates
    p = lower(model)
    clamps = [k for k, i in enumerate(p.instrs) if i.op == Op.CLAMP]
    assert clamps
    # the matmul's SAT input quantizer sits on the upstream LUT sums, and the scan reports it
    assert lut_path_clamps(p) == clamps
    assert verify(model, p, 2000).ok


def test_scan_flags_a_clamp_between_luts():
    p = ir.IrProgram()
    fmt = FxpFormat(False, 2, 0)
    from lutforge.extract import TruthTable
    t = p.add_table(TruthTable(fmt, fmt, [0, 1, 2, 3]))
    a = p.emit(Op.INPUT, fmt, imm=0)
    y = p.emit(Op.LLUT, fmt, a, imm=t)
    c = p.emit(Op.CLAMP, fmt, y)
    z = p.emit(Op.LLUT, fmt, c, imm=t)
    p.emit(Op.OUTPUT, fmt, z, imm=0)
    assert lut_path_clamps(p) == [c]


def test_kernel_one_conv_lowers_like_pointwise_dense():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(64, 5, 2))
    conv = Sequential([LutConv(2, 3, 1, rng=np.random.default_rng(9))], (5, 2))
    dense = Sequential([LutDense(2, 3, rng=np.random.default_rng(9))], (5, 2))
    calibrate_model(conv, x)
    calibrate_model(dense, x)
    pc, pd = lower(conv), lower(dense)
    assert ops(pc) == ops(pd)
    assert Counter(t.entries.tobytes() for t in pc.tables) == Counter(t.entries.tobytes() for t in pd.tables)
    assert verify(conv, pc, 500).ok


def test_padded_conv_uses_shared_zero():
    rng = np.random.default_rng(5)
    model = Sequential([LutConv(1, 2, 3, padding="same", rng=rng)], (6, 1))
    calibrate_model(model, rng.normal(size=(64, 6, 1)))
    p = lower(model)
    assert ops(p)["CONST"] <= 1
    assert verify(model, p, 1000).ok


def test_report_totals_match_estimator():
    model = small_dense(6)
    p, report = lower_report(model)
    assert report.ebops == pytest.approx(ebops_model(model), rel=1e-12)
    assert sum(r.n_instrs for r in report.layers) == len(p) == report.program_length
    csv_rows = report.to_csv().strip().splitlines()
    assert csv_rows[-1].startswith("total,")
    assert float(csv_rows[-1].split(",")[-2]) == pytest.approx(report.ebops, abs=1e-6)
    assert "total" in report.to_text()


def test_pruning_ratio_and_ebops_drop():
    model = small_dense(7)
    _, before = lower_report(model)
    layer = model.layers[0]
    m = int(layer.q_in.width[1, 2])
    n = int(layer.q_out.width[1, 2])
    prune_output(layer, 1, 2)
    _, after = lower_report(model)
    row = next(r for r in after.layers if r.index == 0)
    assert row.n_pruned == 1 and row.pruning_ratio == pytest.approx(1 / 12)
    assert before.ebops - after.ebops == pytest.approx(oracles.ebops_llut(m, n), rel=1e-12, abs=1e-12)


def test_float_only_layers_are_refused():
    model = Sequential([LutDense(2, 2), Activation("relu")], (2,))
    calibrate_model(model, np.ones((4, 2)))
    with pytest.raises(LoweringError):
        lower(model)


def test_program_mismatch_is_reported():
    a, b = small_dense(8), small_dense(9)
    with pytest.raises(LoweringError):
        lower_report(a, program=lower(b))


def test_desk_models_compile_without_lut_path_clamps(desk_models):
    for name, (model, _) in desk_models.items():
        p = lower(copy.deepcopy(model))
        assert lut_path_clamps(p) == [], name
