"""Compile an eval-mode model into an :class:`IrProgram`.

LUT layers become BITSLICE (input requantization, one per distinct source
wire and format) + LLUT + a balanced adder tree per output channel.  LUT-Conv
reuses the same lowering per output position; im2col is pure wire aliasing
with padding read from a shared constant-zero wire.  QDense layers become
CLAMP + MUL_CONST + adder trees.
"""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .estimator import DEFAULT_SPEC, LutPrimitiveSpec, estimate_luts, layer_ebops
from .extract import MAX_TABLE_BITS, ExtractionError, extract_layer
from .fxp import FxpFormat, minimal_format, mul_format, add_format, union_format
from .ir import IrProgram, Op, validate
from .layers import Flatten, LutConv, LutDense, QDense, Sequential

ZERO_WIRE_FORMAT = FxpFormat(False, 1, 0)


class LoweringError(ValueError):
    pass


def _live(dense: LutDense) -> np.ndarray:
    return (dense.q_in.width > 0) & (dense.q_out.width > 0)


def input_formats(model: Sequential) -> list[FxpFormat]:
    """Per-port formats of the program inputs (flattened sample, C order).

    Each port gets the union of the formats its first consumers requantize
    to, so every downstream WRAP slice or CLAMP is exact.
    """
    layers = [layer for layer in model.layers if not isinstance(layer, Flatten)]
    n_ports = int(np.prod(model.input_shape))
    if not layers:
        return [ZERO_WIRE_FORMAT] * n_ports
    first = layers[0]
    if isinstance(first, LutConv):
        dense, channels = first.inner, first.channels
        fmts, live = dense.q_in.formats(), _live(dense)
        per_channel = [union_format(fmts[j, i] for j in range(c, dense.c_in, channels)
                                    for i in range(dense.c_out) if live[j, i])
                       for c in range(channels)]
        return [per_channel[p % channels] or ZERO_WIRE_FORMAT for p in range(n_ports)]
    if isinstance(first, LutDense):
        fmts, live = first.q_in.formats(), _live(first)
        per_j = [union_format(fmts[j, i] for i in range(first.c_out) if live[j, i])
                 for j in range(first.c_in)]
        return [per_j[p % first.c_in] or ZERO_WIRE_FORMAT for p in range(n_ports)]
    if isinstance(first, QDense):
        fmts = first.q_act.formats()
        return [fmts[p % first.c_in] if fmts[p % first.c_in].width else ZERO_WIRE_FORMAT
                for p in range(n_ports)]
    raise LoweringError(f"layer kind {first.kind!r} cannot be lowered to fixed-point hardware")


@dataclass
class _Span:
    index: int
    kind: str
    start: int
    stop: int
    tables: list = field(default_factory=list)


class _Lowerer:
    def __init__(self, model: Sequential, max_table_bits: int):
        self.model = model
        self.max_table_bits = max_table_bits
        self.p = IrProgram()
        self.zero = None
        self.spans: list[_Span] = []

    def const_zero(self) -> int:
        if self.zero is None:
            self.zero = self.p.emit(Op.CONST, ZERO_WIRE_FORMAT, imm=0)
        return self.zero

    def adder_tree(self, terms: list[int]) -> int:
        if not terms:
            return self.const_zero()
        while len(terms) > 1:
            nxt = []
            for k in range(0, len(terms) - 1, 2):
                a, b = terms[k], terms[k + 1]
                nxt.append(self.p.emit(Op.ADD, add_format(self.p.fmt(a), self.p.fmt(b)), a, b))
            if len(terms) % 2:
                nxt.append(terms[-1])
            terms = nxt
        return terms[0]

    def lut_grid(self, row_wires, tables, table_ids, slices) -> list[int]:
        c_in, c_out = tables.shape
        terms = [[] for _ in range(c_out)]
        for j, src in enumerate(row_wires):
            for i in range(c_out):
                t = tables[j, i]
                if t is None:
                    continue
                key = (src, t.in_fmt)
                if key not in slices:
                    slices[key] = self.p.emit(Op.BITSLICE, t.in_fmt, src)
                if (j, i) not in table_ids:
                    table_ids[(j, i)] = self.p.add_table(t)
                terms[i].append(self.p.emit(Op.LLUT, t.out_fmt, slices[key], imm=table_ids[(j, i)]))
        return [self.adder_tree(t) for t in terms]

    def _tables(self, dense: LutDense):
        try:
            return extract_layer(dense, self.max_table_bits)
        except ExtractionError as exc:
            raise LoweringError(f"cannot extract tables: {exc}") from exc

    def lower_lut_dense(self, layer: LutDense, wires, shape):
        tables = self._tables(layer)
        table_ids, slices, out = {}, {}, []
        for pos in range(len(wires) // layer.c_in):
            out += self.lut_grid(wires[pos * layer.c_in:(pos + 1) * layer.c_in], tables, table_ids, slices)
        return out, tables

    def lower_lut_conv(self, layer: LutConv, wires, shape):
        tables = self._tables(layer.inner)
        _, idx = layer.index_map(shape[:-1])
        channels = layer.channels
        table_ids, slices, out = {}, {}, []
        for patch in idx.reshape(-1, idx.shape[-1]):
            row = []
            for src in patch:
                for c in range(channels):
                    row.append(self.const_zero() if src < 0 else wires[src * channels + c])
            out += self.lut_grid(row, tables, table_ids, slices)
        return out, tables

    def lower_qdense(self, layer: QDense, wires, shape):
        for name, q in layer.quantizers().items():
            if not q.enabled or not q.calibrated:
                raise LoweringError(f"qdense.{name} must be enabled and calibrated to lower")
        wq, bq = layer.quantized_weights()
        act_fmts = layer.q_act.formats()
        w_fmts = layer.q_w.formats()
        b_fmts = layer.q_b.formats()
        out = []
        for pos in range(len(wires) // layer.c_in):
            acts = []
            for j in range(layer.c_in):
                fmt = act_fmts[j]
                src = wires[pos * layer.c_in + j]
                if fmt.width == 0:
                    acts.append(None)
                elif fmt.contains(self.p.fmt(src)):
                    acts.append(src)
                else:
                    acts.append(self.p.emit(Op.CLAMP, fmt, src))
            for k in range(layer.c_out):
                terms = []
                for j in range(layer.c_in):
                    if acts[j] is None or wq[j, k] == 0:
                        continue
                    fw = w_fmts[j, k].frac_bits
                    raw = int(wq[j, k] * 2.0 ** fw)
                    fmt = mul_format(self.p.fmt(acts[j]), minimal_format(raw, fw))
                    terms.append(self.p.emit(Op.MUL_CONST, fmt, acts[j], imm=raw, imm_frac=fw))
                if bq[k] != 0:
                    fb = b_fmts[k].frac_bits
                    raw = int(bq[k] * 2.0 ** fb)
                    terms.append(self.p.emit(Op.CONST, minimal_format(raw, fb), imm=raw))
                out.append(self.adder_tree(terms))
        return out, None

    def run(self) -> IrProgram:
        p = self.p
        fmts = input_formats(self.model)
        wires = [p.emit(Op.INPUT, f, imm=k) for k, f in enumerate(fmts)]
        self.spans.append(_Span(-1, "inputs", 0, len(p)))
        shape = self.model.input_shape
        for k, layer in enumerate(self.model.layers):
            start = len(p)
            if isinstance(layer, LutConv):
                wires, tables = self.lower_lut_conv(layer, wires, shape)
            elif isinstance(layer, LutDense):
                wires, tables = self.lower_lut_dense(layer, wires, shape)
            elif isinstance(layer, QDense):
                wires, tables = self.lower_qdense(layer, wires, shape)
            elif isinstance(layer, Flatten):
                tables = None
            else:
                raise LoweringError(f"layer {k} ({layer.kind}) cannot be lowered to fixed-point hardware")
            self.spans.append(_Span(k, layer.kind, start, len(p), tables))
            shape = layer.output_shape(shape)
        start = len(p)
        for port, w in enumerate(wires):
            p.emit(Op.OUTPUT, p.fmt(w), w, imm=port)
        self.spans.append(_Span(-1, "outputs", start, len(p)))
        diags = validate(p)
        if diags:
            raise LoweringError("lowered program is invalid: " + "; ".join(map(str, diags[:5])))
        return p


def lower(model: Sequential, max_table_bits: int = MAX_TABLE_BITS) -> IrProgram:
    return _Lowerer(model, max_table_bits).run()


@dataclass
class LayerReport:
    index: int
    kind: str
    instr_counts: dict
    n_instrs: int
    n_tables: int
    table_bits: int
    n_llut: int
    n_pruned: int
    pruning_ratio: float
    ebops: float
    est_luts: float


@dataclass
class LoweringReport:
    layers: list
    program_length: int
    ebops: float
    est_luts: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        ops = [o.name for o in Op]
        w.writerow(["layer", "kind", "instrs", *ops, "tables", "table_bits", "llut_total",
                    "llut_pruned", "pruning_ratio", "ebops", "est_luts"])
        for r in self.layers:
            w.writerow([r.index, r.kind, r.n_instrs, *[r.instr_counts.get(o, 0) for o in ops],
                        r.n_tables, r.table_bits, r.n_llut, r.n_pruned, f"{r.pruning_ratio:.6f}",
                        f"{r.ebops:.6f}", f"{r.est_luts:.6f}"])
        w.writerow(["total", "", self.program_length, *[sum(r.instr_counts.get(o, 0) for r in self.layers) for o in ops],
                    sum(r.n_tables for r in self.layers), sum(r.table_bits for r in self.layers),
                    sum(r.n_llut for r in self.layers), sum(r.n_pruned for r in self.layers), "",
                    f"{self.ebops:.6f}", f"{self.est_luts:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'layer':>6} {'kind':<10} {'instrs':>7} {'tables':>7} {'tbl bits':>9} {'pruned':>9} {'EBOPs':>12} {'~LUTs':>10}"
        lines = [head, "-" * len(head)]
        for r in self.layers:
            idx = "-" if r.index < 0 else str(r.index)
            pr = f"{r.pruning_ratio:.1%}" if r.n_llut else "-"
            lines.append(f"{idx:>6} {r.kind:<10} {r.n_instrs:>7} {r.n_tables:>7} {r.table_bits:>9} "
                         f"{pr:>9} {r.ebops:>12.2f} {r.est_luts:>10.1f}")
        lines.append("-" * len(head))
        lines.append(f"{'total':>6} {'':<10} {self.program_length:>7} {'':>7} {'':>9} {'':>9} "
                     f"{self.ebops:>12.2f} {self.est_luts:>10.1f}")
        return "\n".join(lines)


def lower_report(model: Sequential, spec: LutPrimitiveSpec = DEFAULT_SPEC,
                 max_table_bits: int = MAX_TABLE_BITS, program: IrProgram | None = None):
    """Lower ``model`` and summarize the result per layer.

    Returns ``(program, report)``.
    """
    lw = _Lowerer(model, max_table_bits)
    p = lw.run()
    if program is not None and program.instrs != p.instrs:
        raise LoweringError("program does not match the model")
    rows = []
    shape = model.input_shape
    layer_shapes = []
    for layer in model.layers:
        layer_shapes.append(shape)
        shape = layer.output_shape(shape)
    for span in lw.spans:
        counts = Counter(p.instrs[k].op.name for k in range(span.start, span.stop))
        tables = set(p.instrs[k].imm for k in range(span.start, span.stop) if p.instrs[k].op == Op.LLUT)
        table_bits = sum(p.tables[t].entries.size * p.tables[t].n for t in tables)
        n_llut = n_pruned = 0
        ebops = 0.0
        if span.index >= 0:
            layer = model.layers[span.index]
            dense = layer.inner if isinstance(layer, LutConv) else layer
            if isinstance(dense, LutDense):
                n_llut = dense.c_in * dense.c_out
                n_pruned = int((~_live(dense)).sum())
            ebops = layer_ebops(layer, layer_shapes[span.index], spec)[0]
        rows.append(LayerReport(span.index, span.kind, dict(counts), span.stop - span.start, len(tables),
                                int(table_bits), n_llut, n_pruned,
                                n_pruned / n_llut if n_llut else 0.0, ebops, estimate_luts(ebops)))
    total = sum(r.ebops for r in rows)
    return p, LoweringReport(rows, len(p), total, estimate_luts(total))
