"""Truth-table extraction: enumerate every quantized input of each L-LUT."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .fxp import FxpFormat, QuantizerState, quantize
from .layers import LayerError, LutDense, mlp_eval

MAX_TABLE_BITS = 16


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class TruthTable:
    in_fmt: FxpFormat
    out_fmt: FxpFormat
    entries: np.ndarray  # uint64, length 2**m, each an out_fmt bit pattern

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.uint64)
        object.__setattr__(self, "entries", entries)
        if entries.shape != (1 << self.in_fmt.width,):
            raise ValueError(f"table needs {1 << self.in_fmt.width} entries, got {entries.shape}")
        if self.out_fmt.width < 64 and entries.size and int(entries.max()) >> self.out_fmt.width:
            raise ValueError("table entry exceeds the output width")

    @property
    def m(self) -> int:
        return self.in_fmt.width

    @property
    def n(self) -> int:
        return self.out_fmt.width

    def raw_outputs(self) -> np.ndarray:
        """Entries decoded to signed raw integers (int64)."""
        e = self.entries.astype(np.int64)
        if self.out_fmt.signed and self.n:
            half = 1 << (self.n - 1)
            e = np.where(e >= half, e - (1 << self.n), e)
        return e

    def __eq__(self, other):
        return (isinstance(other, TruthTable) and self.in_fmt == other.in_fmt
                and self.out_fmt == other.out_fmt and np.array_equal(self.entries, other.entries))

    def __hash__(self):
        return hash((self.in_fmt, self.out_fmt, self.entries.tobytes()))


def enumerate_inputs(fmt: FxpFormat) -> np.ndarray:
    """All values of ``fmt`` in bit-pattern order (index k holds from_bits(k))."""
    w = fmt.width
    k = np.arange(1 << w, dtype=np.int64)
    if fmt.signed and w:
        k = np.where(k >= 1 << (w - 1), k - (1 << w), k)
    return k.astype(np.float64) * fmt.step


def encode(values: np.ndarray, fmts) -> np.ndarray:
    """Encode quantized float values to bit patterns, one format per row."""
    out = np.empty(values.shape, dtype=np.uint64)
    for r, fmt in enumerate(fmts):
        raw = values[r] * 2.0 ** fmt.frac_bits
        out[r] = (raw.astype(np.int64) & ((1 << fmt.width) - 1)).astype(np.uint64)
    return out


def fold_batchnorm(layer: LutDense) -> LutDense:
    """Return a copy whose output affine absorbs eval-mode batch norm."""
    if layer.bn is None:
        return copy.deepcopy(layer)
    try:
        weights, biases = layer.eval_params()
    except LayerError as exc:
        raise ExtractionError(str(exc)) from exc
    folded = copy.deepcopy(layer)
    folded.W = [w.copy() for w in weights]
    folded.B = [b.copy() for b in biases]
    folded.bn = None
    return folded


def extract_layer(layer: LutDense, max_table_bits: int = MAX_TABLE_BITS):
    """Truth tables for every L-LUT of an eval-mode layer.

    Returns a ``(c_in, c_out)`` object array of :class:`TruthTable` or None
    (pruned by zero width, or an all-zero table).
    """
    for name, q in layer.quantizers().items():
        if not q.enabled:
            raise ExtractionError(f"{name} is disabled; tables need fixed-point quantizers")
        if not q.calibrated:
            raise ExtractionError(f"{name} is not calibrated")
    m = layer.q_in.width
    n = layer.q_out.width
    too_wide = np.argwhere((m > max_table_bits) & (n > 0))
    if too_wide.size:
        j, i = too_wide[0]
        raise ExtractionError(
            f"L-LUT ({j},{i}) has a {int(m[j, i])}-bit input; tables are capped at "
            f"2^{max_table_bits} entries (narrow the input quantizer or raise max_table_bits)")
    try:
        weights, biases = layer.eval_params()
    except LayerError as exc:
        raise ExtractionError(str(exc)) from exc
    in_fmts = layer.q_in.formats()
    out_fmts = layer.q_out.formats()
    grid = np.empty((layer.c_in, layer.c_out), dtype=object)
    live = (m > 0) & (n > 0)
    for width in np.unique(m[live]):
        sel = np.argwhere(live & (m == width))
        js, is_ = sel[:, 0], sel[:, 1]
        fin = [in_fmts[j, i] for j, i in zip(js, is_)]
        v = np.stack([enumerate_inputs(f) for f in fin])
        w_sel = [w[js, is_][:, None] for w in weights]
        b_sel = [b[js, is_][:, None] for b in biases]
        y = mlp_eval(v, w_sel, b_sel, layer.activation)
        yq = quantize(y, _rows(layer.q_out, js, is_))
        fout = [out_fmts[j, i] for j, i in zip(js, is_)]
        bits = encode(yq, fout)
        for r, (j, i) in enumerate(zip(js, is_)):
            if not bits[r].any():
                continue
            grid[j, i] = TruthTable(fin[r], fout[r], bits[r])
    return grid


def _rows(q, js, is_):
    """Quantizer restricted to the selected elements, one row each."""
    return QuantizerState((len(js), 1), q.mode, q.rounding, q.min_f, q.max_f, q.enabled, True,
                          f_raw=q.f_raw[js, is_], i_cal=q.i_cal[js, is_], signed=q.signed[js, is_])
