"""Linear fixed-point instruction stream with an L-LUT opcode.

Each instruction defines exactly one wire (its index in the stream) carrying
a raw two's-complement integer in the instruction's result format.  The
interpreters are the executable semantics:

* :func:`interpret` runs one input vector on Python integers and checks every
  intermediate against its wire format.
* :func:`interpret_batch` runs many vectors at once on int64 arrays.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .extract import TruthTable
from .fxp import FxpFormat, add_format, minimal_format, mul_format, sub_format

MAX_WIRE_BITS = 64
MAGIC = b"LFIR"
VERSION = 1


class Op(IntEnum):
    INPUT = 0
    CONST = 1
    ADD = 2
    SUB = 3
    SHL = 4
    SHR = 5
    BITSLICE = 6
    CLAMP = 7
    MUL_CONST = 8
    LLUT = 9
    OUTPUT = 10


@dataclass(frozen=True)
class Instr:
    """One instruction.

    Field use by opcode: ``a``/``b`` are operand wire ids; ``imm`` holds the
    port (INPUT/OUTPUT), raw constant (CONST, MUL_CONST), shift amount
    (SHL/SHR) or table id (LLUT); ``imm_frac`` is the MUL_CONST constant's
    fractional bits.
    """

    op: Op
    fmt: FxpFormat
    a: int = -1
    b: int = -1
    imm: int = 0
    imm_frac: int = 0


@dataclass(frozen=True)
class Diagnostic:
    index: int
    message: str
    other: int | None = None

    def __str__(self):
        where = f"instr {self.index}" if self.index >= 0 else "program"
        extra = f" (operand defined at {self.other})" if self.other is not None else ""
        return f"{where}: {self.message}{extra}"


class InterpretError(RuntimeError):
    def __init__(self, index: int, message: str, sample: int | None = None):
        self.index = index
        self.sample = sample
        where = f"instr {index}" + (f", sample {sample}" if sample is not None else "")
        super().__init__(f"{where}: {message}")


@dataclass
class IrProgram:
    instrs: list = field(default_factory=list)
    tables: list = field(default_factory=list)

    @property
    def inputs(self) -> list[Instr]:
        return sorted((i for i in self.instrs if i.op == Op.INPUT), key=lambda i: i.imm)

    @property
    def outputs(self) -> list[Instr]:
        return sorted((i for i in self.instrs if i.op == Op.OUTPUT), key=lambda i: i.imm)

    @property
    def n_inputs(self) -> int:
        return sum(1 for i in self.instrs if i.op == Op.INPUT)

    @property
    def n_outputs(self) -> int:
        return sum(1 for i in self.instrs if i.op == Op.OUTPUT)

    @property
    def input_formats(self) -> list[FxpFormat]:
        return [i.fmt for i in self.inputs]

    @property
    def output_formats(self) -> list[FxpFormat]:
        return [i.fmt for i in self.outputs]

    # builder helpers; each returns the new wire id
    def emit(self, op: Op, fmt: FxpFormat, a: int = -1, b: int = -1, imm: int = 0,
             imm_frac: int = 0) -> int:
        self.instrs.append(Instr(Op(op), fmt, a, b, int(imm), int(imm_frac)))
        return len(self.instrs) - 1

    def add_table(self, table: TruthTable) -> int:
        self.tables.append(table)
        return len(self.tables) - 1

    def fmt(self, wire: int) -> FxpFormat:
        return self.instrs[wire].fmt

    def __len__(self):
        return len(self.instrs)


def expected_format(p: IrProgram, ins: Instr) -> FxpFormat | None:
    """Result format implied by the opcode rules, or None if it is free."""
    op = ins.op
    if op in (Op.INPUT, Op.CONST, Op.BITSLICE, Op.CLAMP):
        return None
    fa = p.instrs[ins.a].fmt
    if op == Op.OUTPUT:
        return fa
    if op == Op.ADD:
        return add_format(fa, p.instrs[ins.b].fmt)
    if op == Op.SUB:
        return sub_format(fa, p.instrs[ins.b].fmt)
    if op == Op.SHL:
        return FxpFormat(fa.signed, fa.int_bits + ins.imm, fa.frac_bits - ins.imm)
    if op == Op.SHR:
        return FxpFormat(fa.signed, fa.int_bits - ins.imm, fa.frac_bits + ins.imm)
    if op == Op.MUL_CONST:
        return mul_format(fa, minimal_format(ins.imm, ins.imm_frac))
    if op == Op.LLUT:
        return p.tables[ins.imm].out_fmt
    raise AssertionError(op)


def _fits_int64(fmt: FxpFormat) -> bool:
    return fmt.width + (0 if fmt.signed else 1) <= MAX_WIRE_BITS


def validate(p: IrProgram) -> list[Diagnostic]:
    """All invariant violations, in instruction order (empty list means ok)."""
    diags: list[Diagnostic] = []
    in_ports, out_ports = {}, {}
    for k, ins in enumerate(p.instrs):
        try:
            op = Op(ins.op)
        except ValueError:
            diags.append(Diagnostic(k, f"unknown opcode {ins.op}"))
            continue
        operands = [ins.a] if op not in (Op.INPUT, Op.CONST) else []
        if op in (Op.ADD, Op.SUB):
            operands.append(ins.b)
        bad = False
        for o in operands:
            if not 0 <= o < len(p.instrs):
                diags.append(Diagnostic(k, f"operand {o} does not exist"))
                bad = True
            elif o >= k:
                diags.append(Diagnostic(k, "use before definition", other=o))
                bad = True
            elif p.instrs[o].op == Op.OUTPUT:
                diags.append(Diagnostic(k, "OUTPUT has no result wire", other=o))
                bad = True
        if bad:
            continue
        if ins.fmt.width < 1:
            diags.append(Diagnostic(k, f"wire format {ins.fmt} has zero width"))
            continue
        if not _fits_int64(ins.fmt):
            diags.append(Diagnostic(k, f"wire format {ins.fmt} exceeds the {MAX_WIRE_BITS}-bit interpreter limit"))
            continue
        if op == Op.LLUT:
            if not 0 <= ins.imm < len(p.tables):
                diags.append(Diagnostic(k, f"unknown table {ins.imm}"))
                continue
            if p.tables[ins.imm].in_fmt != p.instrs[ins.a].fmt:
                diags.append(Diagnostic(k, "LLUT operand format differs from its table's input format", other=ins.a))
                continue
        if op in (Op.SHL, Op.SHR) and ins.imm < 0:
            diags.append(Diagnostic(k, "negative shift amount"))
            continue
        if op == Op.CONST and not ins.fmt.raw_min <= ins.imm <= ins.fmt.raw_max:
            diags.append(Diagnostic(k, f"constant {ins.imm} does not fit {ins.fmt}"))
            continue
        if op == Op.CLAMP:
            fa = p.instrs[ins.a].fmt
            shifted = fa.width + max(0, ins.fmt.frac_bits - fa.frac_bits)
            if shifted + 1 > MAX_WIRE_BITS:
                diags.append(Diagnostic(k, "CLAMP alignment exceeds the 64-bit interpreter limit"))
                continue
        want = expected_format(p, ins)
        if want is not None and want != ins.fmt:
            diags.append(Diagnostic(k, f"result format {ins.fmt} does not follow the opcode rule ({want})"))
            continue
        if op == Op.INPUT:
            if ins.imm in in_ports:
                diags.append(Diagnostic(k, f"input port {ins.imm} defined twice", other=in_ports[ins.imm]))
            in_ports[ins.imm] = k
        elif op == Op.OUTPUT:
            if ins.imm in out_ports:
                diags.append(Diagnostic(k, f"output port {ins.imm} assigned twice", other=out_ports[ins.imm]))
            out_ports[ins.imm] = k
    for kind, ports in (("input", in_ports), ("output", out_ports)):
        if sorted(ports) != list(range(len(ports))):
            diags.append(Diagnostic(-1, f"{kind} ports are not numbered 0..{len(ports) - 1}"))
    return diags


def _wrap(raw: int, fmt: FxpFormat) -> int:
    w = fmt.width
    raw &= (1 << w) - 1
    if fmt.signed and raw >> (w - 1):
        raw -= 1 << w
    return raw


def _align(raw: int, src: FxpFormat, frac: int) -> int:
    d = frac - src.frac_bits
    return raw << d if d >= 0 else raw >> -d


def _decode_inputs(p: IrProgram, bits):
    fmts = p.input_formats
    if len(bits) != len(fmts):
        raise InterpretError(-1, f"expected {len(fmts)} inputs, got {len(bits)}")
    return fmts


def interpret(p: IrProgram, inputs, check: bool = True) -> list[int]:
    """Run one vector of input bit patterns; returns output bit patterns."""
    fmts = _decode_inputs(p, inputs)
    vals: list[int | None] = [None] * len(p.instrs)
    outputs = {}
    for k, ins in enumerate(p.instrs):
        op = ins.op
        if op == Op.INPUT:
            b = int(inputs[ins.imm])
            fmt = fmts[ins.imm]
            if not 0 <= b < 1 << fmt.width:
                raise InterpretError(k, f"input pattern {b} does not fit {fmt}")
            v = b - (1 << fmt.width) if fmt.signed and b >> (fmt.width - 1) else b
        elif op == Op.CONST:
            v = ins.imm
        elif op == Op.OUTPUT:
            outputs[ins.imm] = vals[ins.a] & ((1 << ins.fmt.width) - 1)
            continue
        else:
            a = vals[ins.a]
            fa = p.instrs[ins.a].fmt
            if op in (Op.ADD, Op.SUB):
                fb = p.instrs[ins.b].fmt
                x = _align(a, fa, ins.fmt.frac_bits)
                y = _align(vals[ins.b], fb, ins.fmt.frac_bits)
                v = x + y if op == Op.ADD else x - y
            elif op in (Op.SHL, Op.SHR):
                v = a
            elif op == Op.BITSLICE:
                v = _wrap(_align(a, fa, ins.fmt.frac_bits), ins.fmt)
            elif op == Op.CLAMP:
                v = min(max(_align(a, fa, ins.fmt.frac_bits), ins.fmt.raw_min), ins.fmt.raw_max)
            elif op == Op.MUL_CONST:
                v = a * ins.imm
            elif op == Op.LLUT:
                table = p.tables[ins.imm]
                pattern = a & ((1 << table.m) - 1)
                e = int(table.entries[pattern])
                v = e - (1 << table.n) if table.out_fmt.signed and e >> (table.n - 1) else e
            else:
                raise InterpretError(k, f"unknown opcode {op}")
        if check:
            if not ins.fmt.raw_min <= v <= ins.fmt.raw_max:
                raise InterpretError(k, f"value {v} overflows wire format {ins.fmt}")
            if not -(1 << 63) <= v < 1 << 63:
                raise InterpretError(k, f"value {v} exceeds the {MAX_WIRE_BITS}-bit limit")
        vals[k] = v
    return [outputs[i] for i in range(len(outputs))]


def _align_np(raw, src: FxpFormat, frac: int):
    d = frac - src.frac_bits
    if d >= 64:
        return np.zeros_like(raw)
    return raw << np.int64(d) if d >= 0 else raw >> np.int64(min(-d, 63))


def _wrap_np(raw, fmt: FxpFormat):
    w = fmt.width
    if w >= 64:
        return raw
    mask = np.int64((1 << w) - 1)
    raw = raw & mask
    if fmt.signed:
        half = np.int64(1 << (w - 1))
        raw = ((raw + half) & mask) - half
    return raw


def interpret_batch(p: IrProgram, inputs) -> np.ndarray:
    """Vectorized :func:`interpret` over rows of ``inputs`` (shape (N, n_inputs))."""
    inputs = np.asarray(inputs, dtype=np.uint64)
    if inputs.ndim != 2:
        inputs = inputs.reshape(-1, p.n_inputs) if inputs.size else np.zeros((0, p.n_inputs), np.uint64)
    n = inputs.shape[0]
    fmts = p.input_formats
    if inputs.shape[1] != len(fmts):
        raise InterpretError(-1, f"expected {len(fmts)} inputs, got {inputs.shape[1]}")
    lut_cache = {}
    vals: list = [None] * len(p.instrs)
    out = np.zeros((n, p.n_outputs), dtype=np.uint64)
    for k, ins in enumerate(p.instrs):
        op = ins.op
        if op == Op.INPUT:
            fmt = fmts[ins.imm]
            col = inputs[:, ins.imm]
            if fmt.width < 64 and n:
                over = np.nonzero(col >> np.uint64(fmt.width))[0]
                if over.size:
                    raise InterpretError(k, f"input pattern does not fit {fmt}", sample=int(over[0]))
            v = col.astype(np.int64)
            if fmt.signed:
                v = _wrap_np(v, fmt)
        elif op == Op.CONST:
            v = np.full(n, ins.imm, dtype=np.int64)
        elif op == Op.OUTPUT:
            w = ins.fmt.width
            raw = vals[ins.a].astype(np.uint64)
            out[:, ins.imm] = raw if w >= 64 else raw & np.uint64((1 << w) - 1)
            continue
        else:
            a = vals[ins.a]
            fa = p.instrs[ins.a].fmt
            if op in (Op.ADD, Op.SUB):
                x = _align_np(a, fa, ins.fmt.frac_bits)
                y = _align_np(vals[ins.b], p.instrs[ins.b].fmt, ins.fmt.frac_bits)
                v = x + y if op == Op.ADD else x - y
            elif op in (Op.SHL, Op.SHR):
                v = a
            elif op == Op.BITSLICE:
                v = _wrap_np(_align_np(a, fa, ins.fmt.frac_bits), ins.fmt)
            elif op == Op.CLAMP:
                v = np.clip(_align_np(a, fa, ins.fmt.frac_bits), ins.fmt.raw_min, ins.fmt.raw_max)
            elif op == Op.MUL_CONST:
                v = a * np.int64(ins.imm)
            elif op == Op.LLUT:
                if ins.imm not in lut_cache:
                    lut_cache[ins.imm] = p.tables[ins.imm].raw_outputs()
                table = p.tables[ins.imm]
                v = lut_cache[ins.imm][a & np.int64((1 << table.m) - 1)]
            else:
                raise InterpretError(k, f"unknown opcode {op}")
        vals[k] = v
    return out


# -- LFIR file format ------------------------------------------------------

_HEAD = struct.Struct("<4sHIIII")
_FMT = struct.Struct("<Bhh")
_INSTR = struct.Struct("<BBhhiiqh")
_COUNT = struct.Struct("<I")


def _pack_fmt(f: FxpFormat) -> bytes:
    return _FMT.pack(int(f.signed), f.int_bits, f.frac_bits)


def _unpack_fmt(buf, off):
    s, i, f = _FMT.unpack_from(buf, off)
    return FxpFormat(bool(s), i, f), off + _FMT.size


def dumps(p: IrProgram) -> bytes:
    out = io.BytesIO()
    out.write(_HEAD.pack(MAGIC, VERSION, p.n_inputs, p.n_outputs, len(p.instrs), len(p.tables)))
    for f in p.input_formats + p.output_formats:
        out.write(_pack_fmt(f))
    for ins in p.instrs:
        out.write(_INSTR.pack(int(ins.op), int(ins.fmt.signed), ins.fmt.int_bits, ins.fmt.frac_bits,
                              ins.a, ins.b, ins.imm, ins.imm_frac))
    for t in p.tables:
        out.write(_pack_fmt(t.in_fmt))
        out.write(_pack_fmt(t.out_fmt))
        out.write(_COUNT.pack(t.entries.size))
        out.write(t.entries.astype("<u8").tobytes())
    return out.getvalue()


class FormatError(ValueError):
    pass


def loads(data: bytes) -> IrProgram:
    if len(data) < _HEAD.size:
        raise FormatError("truncated LFIR header")
    magic, version, n_in, n_out, n_instr, n_tab = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; not an LFIR file")
    if version != VERSION:
        raise FormatError(f"unsupported LFIR version {version}")
    off = _HEAD.size
    try:
        header_fmts = []
        for _ in range(n_in + n_out):
            f, off = _unpack_fmt(data, off)
            header_fmts.append(f)
        p = IrProgram()
        for _ in range(n_instr):
            op, s, i, f, a, b, imm, imm_f = _INSTR.unpack_from(data, off)
            off += _INSTR.size
            p.instrs.append(Instr(Op(op), FxpFormat(bool(s), i, f), a, b, imm, imm_f))
        for _ in range(n_tab):
            fin, off = _unpack_fmt(data, off)
            fout, off = _unpack_fmt(data, off)
            (count,) = _COUNT.unpack_from(data, off)
            off += _COUNT.size
            entries = np.frombuffer(data, dtype="<u8", count=count, offset=off).astype(np.uint64)
            off += 8 * count
            p.tables.append(TruthTable(fin, fout, entries))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"corrupt LFIR body: {exc}") from exc
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes after LFIR body")
    if header_fmts != p.input_formats + p.output_formats:
        raise FormatError("header formats disagree with INPUT/OUTPUT instructions")
    return p


def save(p: IrProgram, path) -> None:
    from .util import atomic_write_bytes

    atomic_write_bytes(path, dumps(p))


def load(path) -> IrProgram:
    with open(path, "rb") as fh:
        return loads(fh.read())
