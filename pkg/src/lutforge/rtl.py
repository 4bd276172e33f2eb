"""Verilog emission for an :class:`IrProgram` plus a self-checking testbench.

Every wire ``w<id>`` is a plain bit vector holding its two's-complement raw
value; arithmetic is done modulo the result width on explicitly sign- or
zero-extended operands, so no Verilog signedness rules are involved except
in the CLAMP comparison.
"""
from __future__ import annotations

import os
import shutil
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fxp import FxpFormat
from .ir import IrProgram, Op, interpret_batch, validate
from .util import atomic_write_text
from .verify import random_inputs

DEFAULT_STAGE_DEPTH = 4
LOGIC_OPS = (Op.ADD, Op.SUB, Op.MUL_CONST, Op.CLAMP, Op.LLUT)


class RtlError(ValueError):
    pass


def _hex(value: int, width: int) -> str:
    return f"{width}'h{value & ((1 << width) - 1):x}"


def _bus_layout(fmts: list[FxpFormat]) -> tuple[list[int], int]:
    """Bit offset of each port (port 0 at the LSB) and the total width."""
    offsets, pos = [], 0
    for f in fmts:
        offsets.append(pos)
        pos += f.width
    return offsets, pos


@dataclass
class Schedule:
    stage: list  # per instruction; -1 for constants and OUTPUT
    n_ranks: int  # pipeline register ranks between input and output registers

    @property
    def latency(self) -> int:
        return 2 + self.n_ranks


def schedule(p: IrProgram, stage_depth: int = DEFAULT_STAGE_DEPTH) -> Schedule:
    """Assign each wire a pipeline stage from its logic depth.

    LLUT, ADD, SUB, MUL_CONST and CLAMP each count as one logic level;
    BITSLICE and shifts are wiring.  ``stage_depth <= 0`` disables pipelining.
    """
    level = [0] * len(p.instrs)
    stage = [-1] * len(p.instrs)
    for k, ins in enumerate(p.instrs):
        if ins.op in (Op.CONST, Op.OUTPUT):
            continue
        if ins.op == Op.INPUT:
            stage[k] = 0
            continue
        ops = [ins.a] + ([ins.b] if ins.op in (Op.ADD, Op.SUB) else [])
        lv = max(level[o] for o in ops)
        if ins.op in LOGIC_OPS:
            lv += 1
            stage[k] = (lv - 1) // stage_depth if stage_depth > 0 else 0
        else:
            stage[k] = max(max(stage[o] for o in ops), 0)
        level[k] = lv
    return Schedule(stage, max([s for s in stage] + [0]))


class _Emitter:
    def __init__(self, p: IrProgram, sched: Schedule, module: str):
        self.p = p
        self.sched = sched
        self.module = module
        self.lines: list[str] = []
        self.delays: dict[int, int] = {}  # wire -> deepest delay needed

    def ref(self, wire: int, at_stage: int) -> str:
        """Name of ``wire`` as seen from logic in ``at_stage``."""
        src = self.sched.stage[wire]
        if src < 0 or at_stage <= src:
            return f"w{wire}"
        d = at_stage - src
        self.delays[wire] = max(self.delays.get(wire, 0), d)
        return f"w{wire}_d{d}"

    def bits(self, wire: int, at_stage: int, lo: int, hi: int) -> str:
        """Bits ``lo..hi`` of the wire's value, extended with zeros below and sign above."""
        fmt = self.p.instrs[wire].fmt
        w = fmt.width
        name = self.ref(wire, at_stage)
        parts = []
        if hi >= w:
            n_top = hi - max(lo, w) + 1
            parts.append(f"{{{n_top}{{{name}[{w - 1}]}}}}" if fmt.signed else f"{n_top}'b0")
        if lo < w and hi >= 0:
            parts.append(f"{name}[{min(hi, w - 1)}:{max(lo, 0)}]")
        if lo < 0:
            parts.append(f"{min(hi, -1) - lo + 1}'b0")
        return parts[0] if len(parts) == 1 else "{" + ", ".join(parts) + "}"

    def aligned(self, wire: int, at_stage: int, frac: int, width: int) -> str:
        """``width`` bits of the wire's value rescaled (floor) to ``frac`` fractional bits."""
        lo = self.p.instrs[wire].fmt.frac_bits - frac
        return self.bits(wire, at_stage, lo, lo + width - 1)

    def instr(self, k: int) -> list[str]:
        ins = self.p.instrs[k]
        fmt, w, st = ins.fmt, ins.fmt.width, self.sched.stage[k]
        if ins.op == Op.INPUT:
            off = self.in_offsets[ins.imm]
            return [f"assign w{k} = in_r[{off + w - 1}:{off}];"]
        if ins.op == Op.CONST:
            return [f"assign w{k} = {_hex(ins.imm, w)};"]
        if ins.op in (Op.ADD, Op.SUB):
            a = self.aligned(ins.a, st, fmt.frac_bits, w)
            b = self.aligned(ins.b, st, fmt.frac_bits, w)
            return [f"assign w{k} = {a} {'+' if ins.op == Op.ADD else '-'} {b};"]
        if ins.op in (Op.SHL, Op.SHR):
            return [f"assign w{k} = {self.ref(ins.a, st)};"]
        if ins.op == Op.BITSLICE:
            return [f"assign w{k} = {self.aligned(ins.a, st, fmt.frac_bits, w)};"]
        if ins.op == Op.MUL_CONST:
            return [f"assign w{k} = {self.bits(ins.a, st, 0, w - 1)} * {_hex(ins.imm, w)};"]
        if ins.op == Op.LLUT:
            return [f"assign w{k} = lut_t{ins.imm}({self.ref(ins.a, st)});"]
        if ins.op == Op.CLAMP:
            fa = self.p.instrs[ins.a].fmt
            wide = max(fa.width + max(0, fmt.frac_bits - fa.frac_bits), w) + 1
            return [f"wire signed [{wide - 1}:0] c{k} = {self.aligned(ins.a, st, fmt.frac_bits, wide)};",
                    f"assign w{k} = (c{k} < $signed({_hex(fmt.raw_min, wide)})) ? {_hex(fmt.raw_min, w)} :",
                    f"    (c{k} > $signed({_hex(fmt.raw_max, wide)})) ? {_hex(fmt.raw_max, w)} : c{k}[{w - 1}:0];"]
        raise RtlError(f"cannot emit opcode {ins.op!r}")

    def lut_function(self, tid: int) -> list[str]:
        t = self.p.tables[tid]
        m, n = t.m, t.n
        out = [f"function automatic [{n - 1}:0] lut_t{tid};",
               f"    input [{m - 1}:0] x;",
               "    begin",
               "        case (x)"]
        for pattern, e in enumerate(t.entries.tolist()):
            out.append(f"            {m}'d{pattern}: lut_t{tid} = {_hex(int(e), n)};")
        out += ["        endcase", "    end", "endfunction"]
        return out

    def emit(self) -> str:
        p = self.p
        self.in_offsets, in_w = _bus_layout(p.input_formats)
        out_offsets, out_w = _bus_layout(p.output_formats)
        in_w, out_w = max(in_w, 1), max(out_w, 1)
        ranks = self.sched.n_ranks
        body: list[str] = []
        for k, ins in enumerate(p.instrs):
            if ins.op == Op.OUTPUT:
                continue
            body.append(f"wire [{ins.fmt.width - 1}:0] w{k};")
            body.extend(self.instr(k))
        outs = p.outputs
        out_terms = [self.ref(o.a, ranks) for o in reversed(outs)]
        regs: list[str] = []
        seq: list[str] = []
        for wire in sorted(self.delays):
            width = p.instrs[wire].fmt.width
            for d in range(1, self.delays[wire] + 1):
                prev = f"w{wire}" if d == 1 else f"w{wire}_d{d - 1}"
                regs.append(f"reg [{width - 1}:0] w{wire}_d{d};")
                seq.append(f"        w{wire}_d{d} <= {prev};")
        used_tables = sorted({ins.imm for ins in p.instrs if ins.op == Op.LLUT})
        lines = [f"// {len(p.instrs)} instructions, {len(used_tables)} tables, "
                 f"{ranks} pipeline ranks, latency {self.sched.latency}",
                 "// WRAP requantization discards high bits by design",
                 "/* verilator lint_off UNUSEDSIGNAL */",
                 f"module {self.module} (",
                 "    input wire clk,",
                 "    input wire rst_n,",
                 "    input wire in_valid,",
                 f"    input wire [{in_w - 1}:0] in_data,",
                 "    output reg out_valid,",
                 f"    output reg [{out_w - 1}:0] out_data",
                 ");",
                 "",
                 f"reg [{in_w - 1}:0] in_r;",
                 f"reg [{ranks}:0] valid_r;"]
        for tid in used_tables:
            lines.extend(self.lut_function(tid))
        lines += body + regs
        lines += ["",
                  "always @(posedge clk) begin",
                  "    in_r <= in_data;"]
        lines += seq
        if outs:
            lines.append(f"    out_data <= {{{', '.join(out_terms)}}};" if len(out_terms) > 1
                         else f"    out_data <= {out_terms[0]};")
        else:
            lines.append(f"    out_data <= {out_w}'b0;")
        lines += ["end",
                  "",
                  "always @(posedge clk) begin",
                  "    if (!rst_n) begin",
                  f"        valid_r <= {ranks + 1}'b0;",
                  "        out_valid <= 1'b0;",
                  "    end else begin",
                  (f"        valid_r <= {{valid_r[{ranks - 1}:0], in_valid}};" if ranks
                   else "        valid_r <= in_valid;"),
                  f"        out_valid <= valid_r[{ranks}];",
                  "    end",
                  "end",
                  "",
                  "endmodule",
                  ""]
        return "\n".join(lines)


def emit_verilog(p: IrProgram, stage_depth: int = DEFAULT_STAGE_DEPTH, module: str = "top") -> dict:
    """Synthesizable Verilog for ``p``: ``{"top.v": text}`` plus the schedule used."""
    diags = validate(p)
    if diags:
        raise RtlError(f"program fails validation: {diags[0]}")
    sched = schedule(p, stage_depth)
    return {"top.v": _Emitter(p, sched, module).emit()}


def pack_bus(rows: np.ndarray, fmts: list[FxpFormat]) -> list[int]:
    offsets, _ = _bus_layout(fmts)
    out = []
    for row in np.asarray(rows, dtype=np.uint64).tolist():
        word = 0
        for off, v in zip(offsets, row):
            word |= int(v) << off
        out.append(word)
    return out


def hex_lines(words: list[int], width: int) -> str:
    digits = max(1, -(-width // 4))
    return "".join(f"{w:0{digits}x}\n" for w in words)


def emit_testbench(p: IrProgram, n_vectors: int, seed: int = 0,
                   stage_depth: int = DEFAULT_STAGE_DEPTH, module: str = "top") -> dict:
    """Testbench plus stimulus/expected hex files produced by :func:`interpret_batch`."""
    sched = schedule(p, stage_depth)
    lat = sched.latency
    stim = random_inputs(p.input_formats, n_vectors, seed)
    expected = interpret_batch(p, stim)
    in_w = max(_bus_layout(p.input_formats)[1], 1)
    out_w = max(_bus_layout(p.output_formats)[1], 1)
    depth = max(n_vectors, 1)
    load = ['        $readmemh("stimuli.hex", stim);',
            '        $readmemh("expected.hex", expv);'] if n_vectors else []
    tb = ["`timescale 1ns/1ps",
          f"module tb_{module};",
          f"localparam integer N = {n_vectors};",
          f"localparam integer LAT = {lat};",
          "reg clk = 1'b0;",
          "reg rst_n = 1'b0;",
          "reg in_valid = 1'b0;",
          f"reg [{in_w - 1}:0] in_data = {in_w}'b0;",
          "wire out_valid;",
          f"wire [{out_w - 1}:0] out_data;",
          f"reg [{in_w - 1}:0] stim [0:{depth - 1}];",
          f"reg [{out_w - 1}:0] expv [0:{depth - 1}];",
          "integer i;",
          "",
          f"{module} dut (.clk(clk), .rst_n(rst_n), .in_valid(in_valid), .in_data(in_data),",
          "    .out_valid(out_valid), .out_data(out_data));",
          "",
          "always #5 clk = ~clk;",
          "",
          "initial begin",
          *load,
          "    repeat (2) @(posedge clk);",
          "    @(negedge clk);",
          "    rst_n = 1'b1;",
          "    for (i = 0; i < N + LAT; i = i + 1) begin",
          "        @(negedge clk);",
          "        if (i >= LAT) begin",
          "            if (!out_valid)",
          '                $fatal(1, "vector %0d: out_valid low after %0d cycles", i - LAT, LAT);',
          "            if (out_data !== expv[i - LAT])",
          '                $fatal(1, "vector %0d: got %h expected %h", i - LAT, out_data, expv[i - LAT]);',
          "        end",
          "        in_valid = (i < N);",
          "        if (i < N) in_data = stim[i];",
          "    end",
          '    $display("PASS %0d vectors, latency %0d", N, LAT);',
          "    $finish;",
          "end",
          "",
          "endmodule",
          ""]
    return {f"tb_{module}.v": "\n".join(tb),
            "stimuli.hex": hex_lines(pack_bus(stim, p.input_formats), in_w),
            "expected.hex": hex_lines(pack_bus(expected, p.output_formats), out_w)}


def write_rtl(p: IrProgram, out_dir, n_vectors: int = 1000, seed: int = 0,
              stage_depth: int = DEFAULT_STAGE_DEPTH) -> Path:
    out = Path(out_dir)
    files = emit_verilog(p, stage_depth)
    files.update(emit_testbench(p, n_vectors, seed, stage_depth))
    files["latency.txt"] = f"{schedule(p, stage_depth).latency}\n"
    for name, text in files.items():
        atomic_write_text(out / name, text)
    return out


# -- simulator driver --------------------------------------------------------

def find_verilator() -> str | None:
    for name in ("verilator", "verilator-cli"):
        path = shutil.which(name)
        if path is None:
            cand = Path(sys.executable).parent / name
            path = str(cand) if cand.exists() else None
        if path is not None and _works(path):
            return path
    return None


def _works(path: str) -> bool:
    try:
        return subprocess.run([path, "--version"], capture_output=True, timeout=60).returncode == 0
    except (OSError, subprocess.SubprocessError):
        return False


@dataclass
class SimResult:
    ok: bool
    returncode: int
    log: str


def _make_env() -> dict:
    env = dict(os.environ)
    env.setdefault("PYTHON3", sys.executable)
    return env


def lint(rtl_dir, verilator: str | None = None) -> SimResult:
    tool = verilator or find_verilator()
    if tool is None:
        raise RtlError("no Verilator installation found")
    proc = subprocess.run([tool, "--lint-only", "-Wall", "top.v"], cwd=rtl_dir,
                          capture_output=True, text=True, env=_make_env())
    return SimResult(proc.returncode == 0 and "%Warning" not in proc.stderr, proc.returncode,
                     proc.stdout + proc.stderr)


def simulate(rtl_dir, verilator: str | None = None, timeout: float = 600) -> SimResult:
    """Build and run ``tb_top.v`` with Verilator; ok means the testbench passed."""
    tool = verilator or find_verilator()
    if tool is None:
        raise RtlError("no Verilator installation found")
    rtl_dir = Path(rtl_dir).resolve()
    build = [tool, "--binary", "--timing", "-Wno-fatal", "-Wno-lint", "-Wno-style",
             "--top-module", "tb_top", "-Mdir", "obj_dir", "-MAKEFLAGS", f"PYTHON3={sys.executable}",
             # some packaged builds leave the precompiled-header include flag empty
             "-MAKEFLAGS", "CFG_CXXFLAGS_PCH_I=-include", "tb_top.v", "top.v"]
    proc = subprocess.run(build, cwd=rtl_dir, capture_output=True, text=True, env=_make_env(),
                          timeout=timeout)
    log = proc.stdout + proc.stderr
    if proc.returncode != 0:
        return SimResult(False, proc.returncode, log)
    run = subprocess.run([str(rtl_dir / "obj_dir" / "Vtb_top")], cwd=rtl_dir, capture_output=True,
                         text=True, timeout=timeout)
    log += run.stdout + run.stderr
    return SimResult(run.returncode == 0 and "PASS" in run.stdout, run.returncode, log)
