"""EBOPs resource surrogate and the EBOPs-to-LUT fit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LutConv, LutDense, QDense, Sequential

LUT_FIT_EXPONENT = 0.985


@dataclass(frozen=True)
class LutPrimitiveSpec:
    """FPGA LUT primitive fan-in ``x`` that splits into ``2**(x - y)`` LUT-``y``."""

    x: int = 6
    y: int = 5

    def __post_init__(self):
        if not 1 <= self.y <= self.x:
            raise ValueError(f"need 1 <= Y <= X, got X={self.x}, Y={self.y}")


DEFAULT_SPEC = LutPrimitiveSpec()


def ebops_llut(m, n, spec: LutPrimitiveSpec = DEFAULT_SPEC):
    """LUT-X count for an L-LUT with ``m`` input and ``n`` output bits.

    Works element-wise on arrays; ``m`` and ``n`` may be fractional (soft
    widths during training).
    """
    m = np.asarray(m, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    big = np.exp2(m - spec.x) * n
    small = m / spec.y * 2.0 ** (spec.y - spec.x) * n
    out = np.where(m >= spec.y, big, small)
    out = np.where((m <= 0) | (n <= 0), 0.0, out)
    return out if out.ndim else float(out)


def ebops_llut_grad(m, n, spec: LutPrimitiveSpec = DEFAULT_SPEC):
    """Partial derivatives of :func:`ebops_llut` with respect to ``m`` and ``n``."""
    m = np.asarray(m, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    live = (m > 0) & (n > 0)
    big = m >= spec.y
    dm = np.where(big, np.exp2(m - spec.x) * np.log(2.0) * n, 2.0 ** (spec.y - spec.x) * n / spec.y)
    dn = np.where(big, np.exp2(m - spec.x), m / spec.y * 2.0 ** (spec.y - spec.x))
    return np.where(live, dm, 0.0), np.where(live, dn, 0.0)


def estimate_luts(ebops: float) -> float:
    if ebops <= 0:
        return 0.0
    return float(np.exp(LUT_FIT_EXPONENT * np.log(ebops)))


def _positions(layer, shape) -> int:
    """Number of hardware copies of a layer's L-LUT grid (conv output positions)."""
    out = layer.output_shape(shape)
    return int(np.prod(out[:-1]))


def _bits(q, soft: bool):
    if soft:
        return q.soft_width()
    return q.width.astype(np.float64), None


def layer_ebops(layer, input_shape, spec: LutPrimitiveSpec = DEFAULT_SPEC, soft: bool = False,
                with_grad: bool = False):
    """EBOPs of one layer; optionally the gradients w.r.t. quantizer ``f_raw``.

    Returns ``(ebops, grads)`` where ``grads`` maps quantizer parameter names
    (``"q_in.f_raw"`` style) to arrays, or ``(ebops, {})``.
    """
    grads = {}
    if not all(q.enabled for q in layer.quantizers().values()):
        return 0.0, grads
    if isinstance(layer, (LutDense, LutConv)):
        dense = layer.inner if isinstance(layer, LutConv) else layer
        copies = _positions(layer, input_shape)
        m, dm_df = _bits(dense.q_in, soft)
        n, dn_df = _bits(dense.q_out, soft)
        total = copies * float(np.sum(ebops_llut(m, n, spec)))
        if with_grad:
            gm, gn = ebops_llut_grad(m, n, spec)
            grads["q_in.f_raw"] = copies * gm * (dm_df if dm_df is not None else 1.0)
            grads["q_out.f_raw"] = copies * gn * (dn_df if dn_df is not None else 1.0)
        return total, grads
    if isinstance(layer, QDense):
        copies = _positions(layer, input_shape)
        bx, dbx = _bits(layer.q_act, soft)
        bw, dbw = _bits(layer.q_w, soft)
        total = copies * float(np.sum(bx[:, None] * bw))
        if with_grad:
            grads["q_act.f_raw"] = copies * (bw.sum(axis=1)) * (dbx if dbx is not None else 1.0)
            grads["q_w.f_raw"] = copies * bx[:, None] * np.ones_like(bw) * (dbw if dbw is not None else 1.0)
        return total, grads
    return 0.0, grads


def ebops_model(model: Sequential, spec: LutPrimitiveSpec = DEFAULT_SPEC, soft: bool = False,
                with_grad: bool = False):
    """Total EBOPs of a model.

    Hard widths (the reporting value) by default; ``soft=True`` uses the
    continuous widths that training differentiates.  With ``with_grad`` the
    return is ``(ebops, {param_name: grad})`` using model-level parameter names.
    """
    shape = model.input_shape
    total, grads = 0.0, {}
    for k, layer in enumerate(model.layers):
        e, g = layer_ebops(layer, shape, spec, soft=soft, with_grad=with_grad)
        total += e
        grads.update({f"{k}.{name}": arr for name, arr in g.items()})
        shape = layer.output_shape(shape)
    return (total, grads) if with_grad else total


def per_layer_ebops(model: Sequential, spec: LutPrimitiveSpec = DEFAULT_SPEC) -> list[float]:
    shape = model.input_shape
    out = []
    for layer in model.layers:
        out.append(layer_ebops(layer, shape, spec)[0])
        shape = layer.output_shape(shape)
    return out
