"""Differential check of a lowered program against the eval-mode float model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fxp import FxpFormat
from .ir import IrProgram, interpret_batch
from .layers import Sequential

DEFAULT_VECTORS = 10_000


def random_inputs(fmts: list[FxpFormat], n: int, seed: int) -> np.ndarray:
    """Uniform random bit patterns, one column per input format, shape (n, len(fmts))."""
    rng = np.random.default_rng(seed)
    out = np.zeros((n, len(fmts)), dtype=np.uint64)
    for k, f in enumerate(fmts):
        if f.width >= 64:
            out[:, k] = rng.integers(0, 1 << 63, size=n, dtype=np.uint64) << np.uint64(1)
            out[:, k] |= rng.integers(0, 2, size=n, dtype=np.uint64)
        else:
            out[:, k] = rng.integers(0, 1 << f.width, size=n, dtype=np.uint64)
    return out


def decode(bits: np.ndarray, fmts: list[FxpFormat]) -> np.ndarray:
    """Bit patterns (n, ports) to float values under each port's format."""
    bits = np.asarray(bits, dtype=np.uint64)
    out = np.zeros(bits.shape, dtype=np.float64)
    for k, f in enumerate(fmts):
        col = bits[:, k].astype(np.int64)
        if f.signed and f.width < 64:
            half = np.int64(1 << (f.width - 1))
            col = ((col + half) & np.int64((1 << f.width) - 1)) - half
        out[:, k] = np.ldexp(col.astype(np.float64), -f.frac_bits)
    return out


@dataclass
class VerifyResult:
    n_vectors: int
    mismatches: int
    first_sample: int | None = None
    first_port: int | None = None
    expected: float | None = None
    got: float | None = None

    @property
    def ok(self) -> bool:
        return self.mismatches == 0

    def __str__(self):
        if self.ok:
            return f"bit-exact over {self.n_vectors} vectors"
        return (f"{self.mismatches} mismatching outputs over {self.n_vectors} vectors; first at sample "
                f"{self.first_sample}, output port {self.first_port}: model {self.expected!r}, "
                f"program {self.got!r}")


def verify(model: Sequential, program: IrProgram, n_vectors: int = DEFAULT_VECTORS,
           seed: int = 0, batch: int = 2048) -> VerifyResult:
    """Compare ``interpret_batch(program)`` with the float eval forward, bit-exactly."""
    stim = random_inputs(program.input_formats, n_vectors, seed)
    in_shape = tuple(model.input_shape)
    out_fmts = program.output_formats
    mismatches, first = 0, None
    for start in range(0, n_vectors, batch):
        chunk = stim[start:start + batch]
        x = decode(chunk, program.input_formats).reshape((len(chunk),) + in_shape)
        want = model.forward(x, training=False).reshape(len(chunk), -1)
        got = decode(interpret_batch(program, chunk), out_fmts)
        if want.shape != got.shape:
            raise ValueError(f"model produces {want.shape[1]} outputs, program {got.shape[1]}")
        bad = np.argwhere(want != got)
        mismatches += len(bad)
        if len(bad) and first is None:
            s, port = (int(v) for v in bad[0])
            first = (start + s, port, float(want[s, port]), float(got[s, port]))
    if first is None:
        return VerifyResult(n_vectors, 0)
    return VerifyResult(n_vectors, mismatches, *first)
