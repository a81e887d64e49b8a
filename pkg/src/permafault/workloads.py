"""Built-in kernel suite with seeded inputs and CPU reference oracles.

Every kernel reads its parameters from constant memory: first the byte
addresses of its buffers (inputs in declaration order, then the output
buffer), then any scalar parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .asm import KernelProgram, assemble
from .isa import LOAD_OPS, STORE_OPS, Instruction, MemSpace, Opcode
from .machine import Machine, MemoryImage, SmConfig

BUFFER_BASE = 0x1000
BUFFER_ALIGN = 0x1000
SENTINEL = 0xDEADBEEF
DEFAULT_INPUT_SEED = 2024

Inputs = dict[str, np.ndarray]


@dataclass(frozen=True)
class Buffer:
    name: str
    words: int


@dataclass(frozen=True)
class Workload:
    name: str
    source: str
    grid: int
    block: int
    inputs: tuple[Buffer, ...]
    output: Buffer
    build: Callable[[np.random.Generator], Inputs]
    oracle: Callable[[Inputs], np.ndarray]
    shared_bytes: int = 0
    params: Callable[[Inputs], list[int]] = field(default=lambda _: [])
    dtype: str = "int32"
    tags: tuple[str, ...] = ()
    description: str = ""

    @cached_property
    def program(self) -> KernelProgram:
        return assemble(self.source, self.name)

    @cached_property
    def regs_used(self) -> int:
        return 1 + max((ins.max_reg for ins in self.program.instructions()
                        if isinstance(ins, Instruction)), default=-1)

    @property
    def regs_per_thread(self) -> int:
        """Register allocation per thread: usage rounded up to a granule of 4."""
        return min(32, max(4, -(-self.regs_used // 4) * 4))

    @cached_property
    def uses_shared(self) -> bool:
        return any(isinstance(i, Instruction) and i.mem_space is MemSpace.SHARED
                   for i in self.program.instructions())

    @cached_property
    def addresses(self) -> dict[str, int]:
        out = {}
        addr = BUFFER_BASE
        for buf in (*self.inputs, self.output):
            out[buf.name] = addr
            addr += -(-4 * buf.words // BUFFER_ALIGN) * BUFFER_ALIGN
        return out

    @property
    def output_addr(self) -> int:
        return self.addresses[self.output.name]

    def config_for(self, base: SmConfig | None = None) -> SmConfig:
        return dataclasses.replace(base or SmConfig(), regs_per_thread=self.regs_per_thread)

    def make_inputs(self, seed: int = DEFAULT_INPUT_SEED) -> Inputs:
        data = self.build(np.random.default_rng(seed))
        for buf in self.inputs:
            arr = data[buf.name]
            if arr.dtype != np.uint32 or arr.shape != (buf.words,):
                raise AssertionError(f"{self.name}: input {buf.name} has wrong shape/dtype")
        return data

    def image(self, data: Inputs, *, poison: bool = True) -> MemoryImage:
        segs = [(self.addresses[b.name], data[b.name]) for b in self.inputs]
        if poison:
            segs.append((self.output_addr, np.full(self.output.words, SENTINEL, np.uint32)))
        const = [self.addresses[b.name] for b in (*self.inputs, self.output)]
        const += [int(x) & 0xFFFFFFFF for x in self.params(data)]
        return MemoryImage(segs, np.array(const, dtype=np.uint32))

    def reference_output(self, data: Inputs) -> np.ndarray:
        out = np.asarray(self.oracle(data))
        if out.dtype != np.uint32:
            out = out.astype(np.uint32)
        return out

    def make_machine(self, config: SmConfig | None = None, data: Inputs | None = None,
                     **kwargs) -> Machine:
        cfg = config if config is not None else self.config_for()
        data = data if data is not None else self.make_inputs()
        return Machine(cfg, self.program, self.grid, self.block, self.image(data),
                       shared_bytes=self.shared_bytes, **kwargs)

    def read_output(self, m: Machine) -> np.ndarray:
        return m.read_global(self.output_addr, self.output.words)

    def static_ops(self) -> set[Opcode]:
        return {i.opcode for i in self.program.instructions() if isinstance(i, Instruction)}


# --------------------------------------------------------------------------
# helpers for float32 oracles

def f32_bits(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).view(np.uint32)


def _f32(bits: np.ndarray) -> np.ndarray:
    return np.asarray(bits, dtype=np.uint32).view(np.float32)


def ffma32(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Fused multiply-add on float32 values with one final rounding step."""
    r = a.astype(np.float64) * b.astype(np.float64) + c.astype(np.float64)
    return r.astype(np.float32)


def _rand_f32(rng: np.random.Generator, n: int) -> np.ndarray:
    return f32_bits(rng.uniform(-2.0, 2.0, n).astype(np.float32))


# --------------------------------------------------------------------------
# kernels

_PROLOGUE_1D = """
    S2R R0, SR_TID_X
    S2R R1, SR_CTAID_X
    S2R R2, SR_NTID_X
    IMAD R3, R1, R2, R0         ; global thread index
"""

VECTORADD_INT = _PROLOGUE_1D + """
    LDI R4, #12
    LDC R5, [R4]                ; n
    ISETP.LT P0, R3, R5
    @!P0 EXIT
    SHL R6, R3, #2
    LDI R4, #0
    LDC R7, [R4]                ; a
    IADD R7, R7, R6
    LDG R8, [R7]
    LDI R4, #4
    LDC R9, [R4]                ; b
    IADD R9, R9, R6
    LDG R10, [R9]
    IADD R11, R8, R10
    LDI R4, #8
    LDC R12, [R4]               ; out
    IADD R12, R12, R6
    STG [R12], R11
    EXIT
"""

VECTORADD_FP = VECTORADD_INT.replace("IADD R11, R8, R10", "FADD R11, R8, R10")

SAXPY = _PROLOGUE_1D + """
    LDI R4, #16
    LDC R5, [R4]                ; n
    ISETP.LT P0, R3, R5
    @!P0 EXIT
    SHL R6, R3, #2
    LDI R4, #12
    LDC R13, [R4]               ; alpha
    LDI R4, #0
    LDC R7, [R4]                ; x
    IADD R7, R7, R6
    LDG R8, [R7]
    LDI R4, #4
    LDC R9, [R4]                ; y
    IADD R9, R9, R6
    LDG R10, [R9]
    FFMA R11, R13, R8, R10
    LDI R4, #8
    LDC R12, [R4]               ; out
    IADD R12, R12, R6
    STG [R12], R11
    EXIT
"""

GEMM_NAIVE = """
    S2R R0, SR_TID_X
    SHR R1, R0, #4              ; row
    AND R2, R0, #15             ; col
    LDI R3, #0
    LDC R4, [R3]                ; A
    LDI R3, #4
    LDC R5, [R3]                ; B
    LDI R3, #8
    LDC R6, [R3]                ; C
    SHL R7, R1, #6
    IADD R7, R4, R7             ; &A[row][0]
    SHL R8, R2, #2
    IADD R8, R5, R8             ; &B[0][col]
    LDI R9, #0                  ; acc = 0.0f
    LDI R10, #0                 ; k
LOOP:
    LDG R11, [R7]
    LDG R12, [R8]
    FFMA R9, R11, R12, R9
    IADD R7, R7, #4
    IADD R8, R8, #64
    IADD R10, R10, #1
    ISETP.LT P0, R10, #16
    .reconv DONE
    @P0 BRA LOOP
DONE:
    SHL R13, R0, #2
    IADD R13, R6, R13
    STG [R13], R9
    EXIT
"""

# Shared layout: As = 16 rows x 8 floats at 0, Bs = 8 rows x 16 floats at 512.
GEMM_TILED = """
    S2R R0, SR_TID_X
    SHR R1, R0, #4              ; row
    AND R2, R0, #15             ; col
    LDI R3, #0
    LDC R4, [R3]                ; A
    LDI R3, #4
    LDC R5, [R3]                ; B
    LDI R3, #8
    LDC R6, [R3]                ; C
    ISETP.LT P0, R2, #8         ; this thread loads an A element
    ISETP.LT P1, R1, #8         ; this thread loads a B element
    SHL R9, R1, #5              ; row * 32: As row
    SHL R10, R2, #2             ; col * 4
    IADD R11, R9, R10           ; As store address
    SHL R14, R1, #6
    IADD R14, R14, R10          ; row * 64 + col * 4
    IADD R12, R14, #512         ; Bs store address
    IADD R13, R4, R14           ; &A[row][col] for tile 0
    IADD R15, R5, R14           ; &B[row][col] for tile 0
    LDI R16, #0                 ; acc
    LDI R17, #0                 ; tile
TILE:
    @P0 LDG R18, [R13]
    @P0 STS [R11], R18
    @P1 LDG R19, [R15]
    @P1 STS [R12], R19
    BAR
    MOV R20, R9
    IADD R21, R10, #512
    LDI R22, #0
INNER:
    LDS R18, [R20]
    LDS R19, [R21]
    FFMA R16, R18, R19, R16
    IADD R20, R20, #4
    IADD R21, R21, #64
    IADD R22, R22, #1
    ISETP.LT P2, R22, #8
    .reconv INNER_DONE
    @P2 BRA INNER
INNER_DONE:
    BAR
    IADD R13, R13, #32
    IADD R15, R15, #512
    IADD R17, R17, #1
    ISETP.LT P3, R17, #2
    .reconv TILE_DONE
    @P3 BRA TILE
TILE_DONE:
    SHL R23, R0, #2
    IADD R23, R6, R23
    STG [R23], R16
    EXIT
"""

REDUCTION = """
    S2R R0, SR_TID_X
    S2R R1, SR_CTAID_X
    S2R R2, SR_NTID_X
    LDI R3, #0
    LDC R4, [R3]                ; in
    LDI R3, #4
    LDC R5, [R3]                ; out
    SHL R6, R2, #2              ; elements per CTA = 4 * ntid
    IMUL R6, R6, R1
    IADD R6, R6, R0
    SHL R6, R6, #2
    IADD R6, R4, R6             ; &in[cta * 4 * ntid + tid]
    SHL R7, R2, #2              ; stride in bytes
    LDG R8, [R6]
    IADD R6, R6, R7
    LDG R9, [R6]
    IADD R8, R8, R9
    IADD R6, R6, R7
    LDG R9, [R6]
    IADD R8, R8, R9
    IADD R6, R6, R7
    LDG R9, [R6]
    IADD R8, R8, R9
    SHL R10, R0, #2
    STS [R10], R8
    BAR
    SHR R11, R2, #1             ; s
RLOOP:
    ISETP.LT P0, R0, R11
    SHL R12, R11, #2
    IADD R12, R10, R12
    @P0 LDS R13, [R12]
    @P0 LDS R14, [R10]
    @P0 IADD R14, R14, R13
    @P0 STS [R10], R14
    BAR
    SHR R11, R11, #1
    ISETP.NE P1, R11, #0
    .reconv RDONE
    @P1 BRA RLOOP
RDONE:
    ISETP.EQ P2, R0, #0
    LDI R3, #0
    @P2 LDS R15, [R3]
    SHL R16, R1, #2
    IADD R16, R5, R16
    @P2 STG [R16], R15
    EXIT
"""

PREFIX_SCAN = _PROLOGUE_1D + """
    LDI R4, #0
    LDC R5, [R4]                ; in
    LDI R4, #4
    LDC R14, [R4]               ; out
    SHL R6, R3, #2
    IADD R7, R5, R6
    LDG R8, [R7]
    SHL R9, R0, #2
    STS [R9], R8
    BAR
    LDI R10, #1                 ; distance
SLOOP:
    ISETP.LE P0, R10, R0
    SHL R11, R10, #2
    ISUB R11, R9, R11
    @P0 LDS R12, [R11]
    BAR
    @P0 IADD R8, R8, R12
    @P0 STS [R9], R8
    BAR
    SHL R10, R10, #1
    ISETP.LT P1, R10, R2
    .reconv SDONE
    @P1 BRA SLOOP
SDONE:
    IADD R13, R14, R6
    STG [R13], R8
    EXIT
"""

# Each thread owns 8 private bins in shared memory (32 bytes at tid * 32);
# threads 0..7 then each sum one bin across all private copies.
HISTOGRAM = """
    S2R R0, SR_TID_X
    S2R R1, SR_NTID_X
    LDI R2, #0
    LDC R3, [R2]                ; in
    LDI R2, #4
    LDC R4, [R2]                ; out
    SHL R5, R0, #5
    LDI R6, #0
    LDI R7, #0
    MOV R8, R5
ZLOOP:
    STS [R8], R6
    IADD R8, R8, #4
    IADD R7, R7, #1
    ISETP.LT P0, R7, #8
    .reconv ZDONE
    @P0 BRA ZLOOP
ZDONE:
    SHL R9, R0, #2
    IADD R9, R3, R9
    SHL R10, R1, #2
    LDI R7, #0
CLOOP:
    LDG R11, [R9]
    AND R11, R11, #7
    SHL R11, R11, #2
    IADD R11, R5, R11
    LDS R12, [R11]
    IADD R12, R12, #1
    STS [R11], R12
    IADD R9, R9, R10
    IADD R7, R7, #1
    ISETP.LT P1, R7, #8
    .reconv CDONE
    @P1 BRA CLOOP
CDONE:
    BAR
    ISETP.LT P2, R0, #8
    .reconv FINISH
    @!P2 BRA FINISH
    SHL R13, R0, #2
    LDI R14, #0
    LDI R7, #0
RLOOP:
    LDS R12, [R13]
    IADD R14, R14, R12
    IADD R13, R13, #32
    IADD R7, R7, #1
    ISETP.LT P3, R7, R1
    .reconv RDONE
    @P3 BRA RLOOP
RDONE:
    SHL R15, R0, #2
    IADD R15, R4, R15
    STG [R15], R14
FINISH:
    EXIT
"""

# One warp per CTA sorts a 32-element slice ascending with a bitonic network
# applied in place on the output buffer.
BITONIC = """
    S2R R0, SR_TID_X
    S2R R1, SR_CTAID_X
    LDI R2, #0
    LDC R3, [R2]                ; in
    LDI R2, #4
    LDC R6, [R2]                ; out
    SHL R4, R1, #7
    SHL R5, R0, #2
    IADD R4, R4, R5
    IADD R7, R3, R4
    LDG R8, [R7]
    IADD R9, R6, R4             ; &out[slice + i]
    STG [R9], R8
    SHL R10, R1, #7
    IADD R10, R6, R10           ; slice base
    LDI R11, #2                 ; k
KLOOP:
    SHR R12, R11, #1            ; j
JLOOP:
    BAR
    XOR R13, R0, R12            ; partner
    ISETP.LE P0, R13, R0
    .reconv JNEXT
    @P0 BRA JNEXT
    SHL R14, R13, #2
    IADD R14, R10, R14
    LDG R15, [R9]
    LDG R16, [R14]
    AND R17, R0, R11
    ISETP.EQ P1, R17, #0        ; ascending block
    .reconv DECIDE
    @P1 BRA ASC
    ISETP.LT P3, R15, R16
    BRA DECIDE
ASC:
    ISETP.LT P3, R16, R15
DECIDE:
    @P3 STG [R9], R16
    @P3 STG [R14], R15
JNEXT:
    SHR R12, R12, #1
    ISETP.NE P4, R12, #0
    .reconv JDONE
    @P4 BRA JLOOP
JDONE:
    SHL R11, R11, #1
    ISETP.LE P5, R11, #32
    .reconv KDONE
    @P5 BRA KLOOP
KDONE:
    EXIT
"""

LOOPY_IOTA = """
    S2R R0, SR_TID_X
    LDI R1, #0
    LDC R2, [R1]                ; out
    AND R3, R0, #7
    IADD R3, R3, #1             ; trip count
    LDI R4, #0
    LDI R5, #0
LOOP:
    IADD R4, R4, R0
    IADD R5, R5, #1
    ISETP.LT P0, R5, R3
    .reconv DONE
    @P0 BRA LOOP
DONE:
    SHL R6, R0, #2
    IADD R6, R2, R6
    STG [R6], R4
    EXIT
"""


# --------------------------------------------------------------------------
# oracles

def _vadd_int(d: Inputs) -> np.ndarray:
    return d["a"] + d["b"]


def _vadd_fp(d: Inputs) -> np.ndarray:
    return f32_bits(_f32(d["a"]) + _f32(d["b"]))


def _saxpy(d: Inputs) -> np.ndarray:
    alpha = np.full(len(d["x"]), _f32(d["alpha"])[0], dtype=np.float32)
    return f32_bits(ffma32(alpha, _f32(d["x"]), _f32(d["y"])))


def _gemm(d: Inputs) -> np.ndarray:
    a = _f32(d["A"]).reshape(16, 16)
    b = _f32(d["B"]).reshape(16, 16)
    acc = np.zeros((16, 16), dtype=np.float32)
    for k in range(16):
        acc = ffma32(np.repeat(a[:, k:k + 1], 16, axis=1), np.repeat(b[k:k + 1, :], 16, axis=0), acc)
    return f32_bits(acc).reshape(-1)


def _reduction(d: Inputs) -> np.ndarray:
    return d["in"].reshape(4, 256).sum(axis=1, dtype=np.uint64).astype(np.uint32)


def _scan(d: Inputs) -> np.ndarray:
    x = d["in"].reshape(2, 128).astype(np.uint64)
    return (np.cumsum(x, axis=1) & 0xFFFFFFFF).astype(np.uint32).reshape(-1)


def _histogram(d: Inputs) -> np.ndarray:
    return np.bincount(d["in"] & 7, minlength=8).astype(np.uint32)


def _bitonic(d: Inputs) -> np.ndarray:
    return np.sort(d["in"].view(np.int32).reshape(2, 32), axis=1).reshape(-1).view(np.uint32)


def _loopy(_: Inputs) -> np.ndarray:
    t = np.arange(64, dtype=np.uint32)
    return t * ((t & 7) + 1)


def _ints(n: int, hi: int = 1 << 16):
    return lambda rng: {"in": rng.integers(0, hi, n, dtype=np.uint32)}


def _build_pair(n: int, fp: bool, names=("a", "b")):
    def build(rng):
        if fp:
            return {names[0]: _rand_f32(rng, n), names[1]: _rand_f32(rng, n)}
        return {names[0]: rng.integers(0, 1 << 31, n, dtype=np.uint32),
                names[1]: rng.integers(0, 1 << 31, n, dtype=np.uint32)}
    return build


def _build_saxpy(rng):
    d = _build_pair(256, True, ("x", "y"))(rng)
    d["alpha"] = f32_bits(np.float32([1.5]))
    return d


def _build_gemm(rng):
    return {"A": _rand_f32(rng, 256), "B": _rand_f32(rng, 256)}


def _build_bitonic(rng):
    return {"in": rng.integers(-1000, 1000, 64).astype(np.int32).view(np.uint32)}


def _suite() -> tuple[Workload, ...]:
    n = 256
    return (
        Workload("vectoradd_int", VECTORADD_INT, 2, 128, (Buffer("a", n), Buffer("b", n)),
                 Buffer("out", n), _build_pair(n, False), _vadd_int,
                 params=lambda d: [n], tags=("int32", "multi-cta"),
                 description="out[i] = a[i] + b[i]"),
        Workload("vectoradd_fp", VECTORADD_FP, 2, 128, (Buffer("a", n), Buffer("b", n)),
                 Buffer("out", n), _build_pair(n, True), _vadd_fp,
                 params=lambda d: [n], dtype="fp32", tags=("fp32", "multi-cta"),
                 description="out[i] = a[i] + b[i] in binary32"),
        Workload("saxpy", SAXPY, 2, 128, (Buffer("x", n), Buffer("y", n)),
                 Buffer("out", n), _build_saxpy, _saxpy,
                 params=lambda d: [int(d["alpha"][0]), n], dtype="fp32",
                 tags=("fp32", "multi-cta"), description="out[i] = alpha * x[i] + y[i] (fused)"),
        Workload("gemm_naive", GEMM_NAIVE, 1, 256, (Buffer("A", 256), Buffer("B", 256)),
                 Buffer("C", 256), _build_gemm, _gemm, dtype="fp32",
                 tags=("fp32", "loop"), description="16x16 C = A B, one thread per element"),
        Workload("gemm_tiled", GEMM_TILED, 1, 256, (Buffer("A", 256), Buffer("B", 256)),
                 Buffer("C", 256), _build_gemm, _gemm, shared_bytes=1024, dtype="fp32",
                 tags=("fp32", "shared", "barrier", "loop"),
                 description="16x16 C = A B with 8-wide k tiles staged in shared memory"),
        Workload("reduction", REDUCTION, 4, 64, (Buffer("in", 1024),), Buffer("out", 4),
                 lambda rng: {"in": rng.integers(0, 1 << 20, 1024, dtype=np.uint32)},
                 _reduction, shared_bytes=256, tags=("int32", "shared", "multi-cta", "barrier"),
                 description="per-CTA sums of 1024 integers (shared-memory tree)"),
        Workload("prefix_scan", PREFIX_SCAN, 2, 128, (Buffer("in", 256),), Buffer("out", 256),
                 _ints(256), _scan, shared_bytes=512,
                 tags=("int32", "shared", "multi-cta", "barrier"),
                 description="inclusive scan of each 128-element CTA slice"),
        Workload("histogram", HISTOGRAM, 1, 64, (Buffer("in", 512),), Buffer("out", 8),
                 _ints(512), _histogram, shared_bytes=2048, tags=("int32", "shared", "barrier"),
                 description="8-bin histogram with per-thread private bins"),
        Workload("bitonic", BITONIC, 2, 32, (Buffer("in", 64),), Buffer("out", 64),
                 _build_bitonic, _bitonic, tags=("int32", "control-flow", "multi-cta"),
                 description="bitonic sort of two 32-element slices"),
        Workload("loopy_iota", LOOPY_IOTA, 1, 64, (), Buffer("out", 64),
                 lambda rng: {}, _loopy, tags=("int32", "control-flow", "loop"),
                 description="out[t] = t * ((t & 7) + 1) by a divergent counted loop"),
    )


SUITE: tuple[Workload, ...] = _suite()
_BY_NAME = {w.name: w for w in SUITE}
ALIASES = {"vectoradd": "vectoradd_int", "gemm_lite": "gemm_naive", "reduction_sum": "reduction",
           "bitonic_stage": "bitonic"}


def list_workloads() -> tuple[Workload, ...]:
    return SUITE


def get_workload(name: str) -> Workload:
    key = name.strip().lower().replace("-", "_")
    try:
        return _BY_NAME[ALIASES.get(key, key)]
    except KeyError:
        raise KeyError(f"unknown workload {name!r}; known: {', '.join(_BY_NAME)}") from None


def reference_output(workload: Workload, inputs: Inputs) -> np.ndarray:
    return workload.reference_output(inputs)
