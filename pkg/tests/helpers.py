"""Model construction and checking utilities shared by the tests."""
import numpy as np

from lutforge.ir import IrProgram, Op
from lutforge.layers import LutDense, Sequential


def calibrate_model(model: Sequential, x: np.ndarray) -> Sequential:
    """One training-mode pass so every quantizer gets calibrated."""
    model.forward(x, training=True)
    return model


def dense_as_luts(w: np.ndarray, b: np.ndarray) -> LutDense:
    """LUT-Dense whose L-LUT (j, i) computes w[j, i] * relu(x) + b[i] / c_in, quantizers off."""
    c_in, c_out = w.shape
    layer = LutDense(c_in, c_out, hidden=(1,), activation="relu")
    layer.W[0][...] = 1.0
    layer.B[0][...] = 0.0
    layer.W[1][..., 0] = w
    layer.B[1][...] = np.broadcast_to(b / c_in, (c_in, c_out))
    layer.q_in.enabled = layer.q_out.enabled = False
    return layer


def grad_rel_errors(model: Sequential, x: np.ndarray, r: np.ndarray, eps: float = 1e-6,
                    floor: float = 1e-7) -> dict:
    """Max relative error of analytic vs central-difference gradients, per parameter.

    The scalar objective is ``sum(model(x) * r)`` in training mode.  Relative
    error is ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    model.forward(x, training=True)
    model.backward(r)
    grads = {k: v.copy() for k, v in model.named_grads().items()}
    out = {}
    for name, p in model.named_params().items():
        if name.endswith("f_raw"):
            continue
        g = grads[name]
        worst = 0.0
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = float(np.sum(model.forward(x, training=True) * r))
            p[idx] = old - eps
            down = float(np.sum(model.forward(x, training=True) * r))
            p[idx] = old
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), floor))
        out[name] = worst
    return out


def prune_output(dense: LutDense, j: int, i: int) -> None:
    """Drive L-LUT (j, i)'s output quantizer to zero width."""
    q = dense.q_out
    q.f_raw[j, i] = -(int(q.i_cal[j, i]) + int(q.signed[j, i]))


_PASS_THROUGH = {Op.ADD, Op.SUB, Op.SHL, Op.SHR, Op.BITSLICE, Op.CLAMP}


def lut_path_clamps(p: IrProgram) -> list[int]:
    """Indices of CLAMP instructions lying on any L-LUT input or output path.

    Input paths run backwards from each LLUT operand through arithmetic and
    slicing; output paths run forwards from each LLUT result through the
    same, ending at the next LLUT or an OUTPUT.
    """
    users: dict[int, list[int]] = {}
    for k, ins in enumerate(p.instrs):
        for src in (ins.a, ins.b) if ins.op in (Op.ADD, Op.SUB) else (ins.a,):
            if src >= 0 and ins.op not in (Op.INPUT, Op.CONST):
                users.setdefault(src, []).append(k)
    found = set()
    for k, ins in enumerate(p.instrs):
        if ins.op != Op.LLUT:
            continue
        stack = [ins.a]
        while stack:
            w = stack.pop()
            src = p.instrs[w]
            if src.op == Op.CLAMP:
                found.add(w)
            if src.op in _PASS_THROUGH:
                stack += [src.a, src.b] if src.op in (Op.ADD, Op.SUB) else [src.a]
        stack = list(users.get(k, []))
        while stack:
            w = stack.pop()
            dst = p.instrs[w]
            if dst.op == Op.CLAMP:
                found.add(w)
            if dst.op in _PASS_THROUGH:
                stack += users.get(w, [])
    return sorted(found)
