"""Deterministic single-SM SIMT simulator.

One warp issues per step across all 32 lanes of the (single) PPB.  Branch
divergence is handled with a per-warp reconvergence stack whose
reconvergence points come from the BRA encoding (``.reconv`` in source).

The instruction front end (warp selection, fetch, decode) is pluggable:
:class:`DirectFrontend` is the fast reference path; the bit-level unit
models in :mod:`permafault.units` provide a drop-in front end on which
stuck-at faults can be forced.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Protocol, TextIO

import numpy as np

from .asm import KernelProgram
from .isa import (
    ILLEGAL_WORD, LOAD_OPS, STORE_OPS, TRUE_PRED, Cmp, IllegalInstruction, Instruction,
    MemSpace, Opcode, SpecialReg, decode,
)

WARP_SIZE = 32
LANE_IDS = np.arange(WARP_SIZE, dtype=np.uint32)
_POW2 = (np.uint64(1) << np.arange(WARP_SIZE, dtype=np.uint64))
FULL_MASK = 0xFFFFFFFF


@dataclass(frozen=True)
class SmConfig:
    num_ppb: int = 1
    lanes_per_ppb: int = 32
    warp_size: int = 32
    max_resident_warps: int = 8
    regs_per_thread: int = 32
    shared_mem_bytes: int = 16384
    global_mem_bytes: int = 1 << 20
    constant_mem_bytes: int = 4096
    watchdog_factor: int = 10

    def __post_init__(self) -> None:
        for name in ("num_ppb", "lanes_per_ppb", "warp_size", "max_resident_warps",
                     "regs_per_thread", "shared_mem_bytes", "global_mem_bytes",
                     "constant_mem_bytes", "watchdog_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.warp_size != self.lanes_per_ppb or self.warp_size != WARP_SIZE:
            raise ValueError("warp_size and lanes_per_ppb must both be 32")
        if self.regs_per_thread > 32:
            raise ValueError("regs_per_thread must be <= 32")
        if self.max_resident_warps > 16:
            raise ValueError("max_resident_warps must be <= 16 (4-bit warp ids)")
        for name in ("shared_mem_bytes", "global_mem_bytes", "constant_mem_bytes"):
            if getattr(self, name) % 4:
                raise ValueError(f"{name} must be a multiple of 4")


class TrapKind(str, enum.Enum):
    ILLEGAL_INSTRUCTION = "ILLEGAL_INSTRUCTION"
    INVALID_REGISTER = "INVALID_REGISTER"
    BAD_GLOBAL_ADDR = "BAD_GLOBAL_ADDR"
    BAD_SHARED_ADDR = "BAD_SHARED_ADDR"
    BAD_CONST_ADDR = "BAD_CONST_ADDR"
    BARRIER_DEADLOCK = "BARRIER_DEADLOCK"
    WATCHDOG_HANG = "WATCHDOG_HANG"


@dataclass(frozen=True)
class Trap:
    kind: TrapKind
    detail: str
    at_instruction: int


class MachineTrapped(RuntimeError):
    pass


class WarpStatus(enum.IntEnum):
    READY = 0
    ACTIVE = 1
    AT_BARRIER = 2
    FINISHED = 3


class StackEntry:
    __slots__ = ("pc", "rpc", "mask")

    def __init__(self, pc: int, rpc: int | None, mask: int):
        self.pc = pc
        self.rpc = rpc
        self.mask = mask

    def __repr__(self) -> str:
        return f"StackEntry(pc={self.pc}, rpc={self.rpc}, mask=0x{self.mask:08x})"


@dataclass
class WarpState:
    warp_id: int
    cta_id: int
    cta_slot: int
    warp_in_cta: int
    ppb_id: int
    stack: list[StackEntry]
    status: WarpStatus = WarpStatus.READY

    @property
    def pc(self) -> int:
        return self.stack[-1].pc if self.stack else 0

    @property
    def active_mask(self) -> int:
        return self.stack[-1].mask if self.stack else 0


@dataclass
class CtaRecord:
    cta_id: int
    slot: int
    warps: list[int]
    smem_base: int


class Issue(NamedTuple):
    """What the front end hands to the execute stage for one step."""

    warp: int
    pc: int
    word: int
    instr: Instruction | IllegalInstruction
    mem_space: int
    thread_mask: int
    lane_mask: int
    cta_id: int
    smem_base: int


class Frontend(Protocol):
    def issue(self, m: "Machine") -> Issue | None: ...


@dataclass
class MemoryImage:
    """Initial memory contents: global segments by byte address plus constant words."""

    global_segments: list[tuple[int, np.ndarray]] = field(default_factory=list)
    constant: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))


def save_image(path: str | Path, words: np.ndarray) -> None:
    """Raw little-endian image with an 8-byte length header."""
    data = np.ascontiguousarray(words, dtype="<u4").tobytes()
    Path(path).write_bytes(struct.pack("<Q", len(data)) + data)


def load_image(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    (n,) = struct.unpack_from("<Q", data)
    if len(data) != 8 + n or n % 4:
        raise ValueError(f"{path}: corrupt image ({len(data)} bytes, header says {n})")
    return np.frombuffer(data, dtype="<u4", offset=8).astype(np.uint32)


@dataclass
class HookContext:
    machine: "Machine"
    warp: int
    instr: Instruction
    dyn_index: int
    lanes: np.ndarray          # issued lanes (bool[32])
    executed: np.ndarray | None = None  # lanes that executed (post hooks only)

    def guard(self) -> np.ndarray:
        return self.machine.guard_lanes(self.warp, self.instr, self.lanes)


Hook = Callable[[HookContext], None]


@dataclass
class HookSet:
    pre_hooks: list[Hook] = field(default_factory=list)
    post_hooks: list[Hook] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.pre_hooks or self.post_hooks)


@dataclass(frozen=True)
class StepReport:
    dyn_index: int | None
    warp: int | None
    pc: int | None
    mnemonic: str | None
    mask: int

    @property
    def bubble(self) -> bool:
        return self.warp is None


class RunStatus(str, enum.Enum):
    COMPLETED = "COMPLETED"
    TRAPPED = "TRAPPED"


@dataclass
class RunOutcome:
    status: RunStatus
    dyn_instr_count: int
    trap: Trap | None
    machine: "Machine"

    @property
    def completed(self) -> bool:
        return self.status is RunStatus.COMPLETED


# ---------------------------------------------------------------------------
# lane arithmetic shared with the error injector

def _f32(x: np.ndarray) -> np.ndarray:
    return x.view(np.float32)


def alu_eval(op: Opcode, a: np.ndarray, b: np.ndarray | None = None,
             c: np.ndarray | None = None) -> np.ndarray:
    """Evaluate a data-processing opcode lane-wise on uint32 bit patterns."""
    if op is Opcode.IADD:
        return a + b
    if op is Opcode.ISUB:
        return a - b
    if op is Opcode.IMUL:
        return a * b
    if op is Opcode.IMAD:
        return a * b + c
    if op is Opcode.AND:
        return a & b
    if op is Opcode.OR:
        return a | b
    if op is Opcode.XOR:
        return a ^ b
    if op is Opcode.SHL:
        return a << (b & np.uint32(31))
    if op is Opcode.SHR:
        return a >> (b & np.uint32(31))
    if op is Opcode.FADD:
        return (_f32(a) + _f32(b)).view(np.uint32)
    if op is Opcode.FMUL:
        return (_f32(a) * _f32(b)).view(np.uint32)
    if op is Opcode.FFMA:
        # single rounding: binary32 products are exact in binary64
        r = _f32(a).astype(np.float64) * _f32(b).astype(np.float64) + _f32(c).astype(np.float64)
        return r.astype(np.float32).view(np.uint32)
    if op is Opcode.FRCP:
        return (np.float32(1.0) / _f32(a)).view(np.uint32)
    if op is Opcode.MOV:
        return a.copy()
    raise ValueError(f"{op.name} is not a data-processing opcode")


def compare(op: Opcode, cmp: Cmp, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if op is Opcode.ISETP:
        x, y = a.view(np.int32), b.view(np.int32)
    else:
        x, y = _f32(a), _f32(b)
    if cmp is Cmp.LT:
        return x < y
    if cmp is Cmp.LE:
        return x <= y
    if cmp is Cmp.EQ:
        return x == y
    return x != y


def mask_to_lanes(mask: int) -> np.ndarray:
    return ((mask >> LANE_IDS.astype(np.uint64)) & 1).astype(bool)


def lanes_to_mask(lanes: np.ndarray) -> int:
    return int(np.dot(lanes.astype(np.uint64), _POW2))


_LANE_CACHE: dict[int, np.ndarray] = {}


def lanes_of(mask: int) -> np.ndarray:
    arr = _LANE_CACHE.get(mask)
    if arr is None:
        arr = mask_to_lanes(mask)
        arr.flags.writeable = False
        if len(_LANE_CACHE) < 65536:
            _LANE_CACHE[mask] = arr
    return arr


# ---------------------------------------------------------------------------

class DirectFrontend:
    """Fault-free scheduler/fetch/decode with round-robin warp selection.

    ``rr_ptr`` holds the last issued warp (reset value 0); the search for the
    next READY warp starts just after it.
    """

    def __init__(self, program: KernelProgram, num_slots: int):
        self.decoded = [decode(w) for w in program.words]
        self.words = program.words
        self.n = num_slots
        self.rr_ptr = 0

    def issue(self, m: "Machine") -> Issue | None:
        n = self.n
        warps = m.warps
        start = self.rr_ptr + 1
        for k in range(n):
            w = (start + k) % n
            ws = warps[w]
            if ws is not None and ws.status is WarpStatus.READY:
                break
        else:
            return None
        self.rr_ptr = w
        pc = ws.stack[-1].pc
        if pc < len(self.words):
            word = self.words[pc]
            ins = self.decoded[pc]
        else:
            word = ILLEGAL_WORD
            ins = IllegalInstruction(word)
        cta = m.cta_slots[ws.cta_slot]
        ms = ins.mem_space if isinstance(ins, Instruction) else MemSpace.NONE
        return Issue(w, pc, word, ins, int(ms), ws.stack[-1].mask, FULL_MASK,
                     cta.cta_id, cta.smem_base)


class Machine:
    """State of one SM running one kernel launch (the SmState of the model)."""

    def __init__(self, config: SmConfig, program: KernelProgram, grid: int, block: int,
                 inputs: MemoryImage | None = None, *, shared_bytes: int = 0,
                 hooks: HookSet | None = None, frontend_factory=None,
                 trace: TextIO | list | None = None):
        if grid <= 0 or block <= 0:
            raise ValueError("grid and block must be positive")
        if block > config.max_resident_warps * config.warp_size:
            raise ValueError(f"block of {block} threads exceeds "
                             f"{config.max_resident_warps} resident warps")
        if len(program) == 0:
            raise ValueError("empty program")
        self.config = config
        self.program = program
        self.grid = grid
        self.block = block
        self.hooks = hooks or HookSet()
        self.trace = trace
        n = config.max_resident_warps
        self.num_slots = n
        self.warps_per_cta = -(-block // WARP_SIZE)
        self.cta_shared_bytes = (shared_bytes + 3) & ~3
        if self.cta_shared_bytes > config.shared_mem_bytes:
            raise ValueError(f"CTA needs {shared_bytes} B of shared memory, "
                             f"SM has {config.shared_mem_bytes}")
        max_ctas = n if self.cta_shared_bytes == 0 else min(
            n, config.shared_mem_bytes // self.cta_shared_bytes)
        self.num_cta_slots = n
        self.usable_cta_slots = max_ctas

        self.regs = np.zeros((n, 32, WARP_SIZE), dtype=np.uint32)
        self.preds = np.zeros((n, 8, WARP_SIZE), dtype=bool)
        self.preds[:, TRUE_PRED, :] = True
        self.global_mem = np.zeros(config.global_mem_bytes // 4, dtype=np.uint32)
        self.constant_mem = np.zeros(config.constant_mem_bytes // 4, dtype=np.uint32)
        self.shared_mem = np.zeros(config.shared_mem_bytes // 4, dtype=np.uint32)
        if inputs is not None:
            self.load_inputs(inputs)

        self.warps: list[WarpState | None] = [None] * n
        self.cta_slots: list[CtaRecord | None] = [None] * n
        self.pending = list(range(grid))
        self.finished_ctas: list[int] = []
        self.dispatch_log: list[tuple[int, int, int]] = []  # (dyn count, cta id, cta slot)
        self.dyn_instr_count = 0
        self.trap: Trap | None = None
        self._bubbles = 0
        self._imm_cache: dict[int, np.ndarray] = {}

        self._dispatch()
        factory = frontend_factory or (lambda m: DirectFrontend(m.program, m.num_slots))
        self.frontend: Frontend = factory(self)

    # -- setup -------------------------------------------------------------

    def load_inputs(self, image: MemoryImage) -> None:
        for addr, data in image.global_segments:
            data = np.asarray(data, dtype=np.uint32)
            if addr % 4 or addr < 0 or addr + 4 * len(data) > self.config.global_mem_bytes:
                raise ValueError(f"global segment at 0x{addr:x} ({len(data)} words) does not fit")
            self.global_mem[addr // 4: addr // 4 + len(data)] = data
        c = np.asarray(image.constant, dtype=np.uint32)
        if 4 * len(c) > self.config.constant_mem_bytes:
            raise ValueError("constant image does not fit")
        self.constant_mem[: len(c)] = c

    @property
    def regs_limit(self) -> int:
        return self.config.regs_per_thread

    def _dispatch(self) -> None:
        while self.pending:
            free_warps = [i for i, w in enumerate(self.warps) if w is None]
            free_ctas = [i for i in range(self.usable_cta_slots) if self.cta_slots[i] is None]
            if len(free_warps) < self.warps_per_cta or not free_ctas:
                return
            cta_id = self.pending.pop(0)
            slot = free_ctas[0]
            ws = free_warps[: self.warps_per_cta]
            base = slot * self.cta_shared_bytes
            self.cta_slots[slot] = CtaRecord(cta_id, slot, ws, base)
            if self.cta_shared_bytes:
                self.shared_mem[base // 4: (base + self.cta_shared_bytes) // 4] = 0
            for k, w in enumerate(ws):
                nthreads = min(WARP_SIZE, self.block - k * WARP_SIZE)
                mask = FULL_MASK if nthreads == WARP_SIZE else (1 << nthreads) - 1
                self.warps[w] = WarpState(
                    warp_id=w, cta_id=cta_id, cta_slot=slot, warp_in_cta=k,
                    ppb_id=w % self.config.num_ppb,
                    stack=[StackEntry(self.program.entry, None, mask)])
                self.regs[w] = 0
                self.preds[w] = False
                self.preds[w, TRUE_PRED] = True
            self.dispatch_log.append((self.dyn_instr_count, cta_id, slot))

    # -- helpers -----------------------------------------------------------

    def set_trap(self, kind: TrapKind, detail: str, at: int | None = None) -> None:
        if self.trap is None:
            self.trap = Trap(kind, detail, self.dyn_instr_count if at is None else at)

    def finished(self) -> bool:
        return not self.pending and all(w is None for w in self.warps)

    def guard_lanes(self, w: int, ins: Instruction, lanes: np.ndarray) -> np.ndarray:
        if ins.pred == TRUE_PRED:
            return np.zeros(WARP_SIZE, bool) if ins.pred_neg else lanes
        p = self.preds[w, ins.pred]
        return lanes & (~p if ins.pred_neg else p)

    def _imm_vec(self, value: int) -> np.ndarray:
        v = self._imm_cache.get(value)
        if v is None:
            v = np.full(WARP_SIZE, value & FULL_MASK, dtype=np.uint32)
            v.flags.writeable = False
            self._imm_cache[value] = v
        return v

    def operand_b(self, w: int, ins: Instruction) -> np.ndarray:
        return self._imm_vec(ins.imm) if ins.has_imm else self.regs[w, ins.src2]

    def special_vector(self, w: int, which: SpecialReg, cta_id: int) -> np.ndarray:
        ws = self.warps[w]
        if which is SpecialReg.SR_TID_X:
            base = ws.warp_in_cta * WARP_SIZE if ws is not None else 0
            return LANE_IDS + np.uint32(base)
        if which is SpecialReg.SR_CTAID_X:
            return self._imm_vec(cta_id)
        if which is SpecialReg.SR_NTID_X:
            return self._imm_vec(self.block)
        if which is SpecialReg.SR_NCTAID_X:
            return self._imm_vec(self.grid)
        if which is SpecialReg.SR_LANEID:
            return LANE_IDS
        return self._imm_vec(w)

    # -- execution ---------------------------------------------------------

    def step(self) -> StepReport:
        if self.trap is not None:
            raise MachineTrapped(f"machine trapped: {self.trap}")
        if self.finished():
            raise RuntimeError("all warps finished")
        iss = self.frontend.issue(self)
        if iss is None or iss.warp >= self.num_slots:
            self._bubbles += 1
            if self._bubbles >= 2 * self.num_slots:
                kind = (TrapKind.BARRIER_DEADLOCK if self._any_at_barrier()
                        else TrapKind.WATCHDOG_HANG)
                self.set_trap(kind, "no selectable warp while unfinished warps exist")
            return StepReport(None, None, None, None, 0)
        self._bubbles = 0
        dyn = self.dyn_instr_count
        self.dyn_instr_count += 1
        w = iss.warp
        ins = iss.instr
        mask = iss.thread_mask & iss.lane_mask
        if self.trace is not None:
            self._trace_line(dyn, w, iss.pc, ins, mask)
        if not isinstance(ins, Instruction):
            self.set_trap(TrapKind.ILLEGAL_INSTRUCTION,
                          f"word 0x{iss.word:08x} at pc {iss.pc}", dyn)
            return StepReport(dyn, w, iss.pc, None, mask)
        lanes = lanes_of(mask)
        if mask and ins.max_reg >= self.config.regs_per_thread:
            self.set_trap(TrapKind.INVALID_REGISTER,
                          f"{ins.mnemonic} uses R{ins.max_reg} >= {self.config.regs_per_thread}", dyn)
            return StepReport(dyn, w, iss.pc, ins.mnemonic, mask)

        hooks = self.hooks
        ctx = None
        if hooks.pre_hooks:
            ctx = HookContext(self, w, ins, dyn, lanes)
            for h in hooks.pre_hooks:
                h(ctx)
                if self.trap is not None:
                    return StepReport(dyn, w, iss.pc, ins.mnemonic, mask)
        ex = self.guard_lanes(w, ins, lanes)
        self._execute(w, ins, ex, iss, dyn)
        if self.trap is not None:
            return StepReport(dyn, w, iss.pc, ins.mnemonic, mask)
        if hooks.post_hooks:
            if ctx is None:
                ctx = HookContext(self, w, ins, dyn, lanes)
            ctx.executed = ex
            for h in hooks.post_hooks:
                h(ctx)
                if self.trap is not None:
                    return StepReport(dyn, w, iss.pc, ins.mnemonic, mask)
        self._control(w, ins, ex, iss.pc)
        return StepReport(dyn, w, iss.pc, ins.mnemonic, mask)

    def _trace_line(self, dyn: int, w: int, pc: int, ins, mask: int) -> None:
        name = ins.mnemonic if isinstance(ins, Instruction) else "ILLEGAL"
        line = f"step={dyn} warp={w} pc={pc} op={name} mask={mask:08x}"
        if isinstance(self.trace, list):
            self.trace.append(line)
        else:
            self.trace.write(line + "\n")

    def _write(self, w: int, reg: int, res: np.ndarray, ex: np.ndarray) -> None:
        row = self.regs[w, reg]
        np.copyto(row, res, where=ex)

    def _execute(self, w: int, ins: Instruction, ex: np.ndarray, iss: Issue, dyn: int) -> None:
        op = ins.opcode
        R = self.regs
        kind = _KIND[op]
        if kind == 0:      # binary ALU
            self._write(w, ins.dst, alu_eval(op, R[w, ins.src1], self.operand_b(w, ins)), ex)
        elif kind == 1:    # ternary
            self._write(w, ins.dst, alu_eval(op, R[w, ins.src1], self.operand_b(w, ins),
                                             R[w, ins.src3]), ex)
        elif kind == 2:    # unary
            self._write(w, ins.dst, alu_eval(op, R[w, ins.src1]), ex)
        elif kind == 3:    # setp
            if ins.pdst != TRUE_PRED:
                res = compare(op, ins.cmp, R[w, ins.src1], self.operand_b(w, ins))
                np.copyto(self.preds[w, ins.pdst], res, where=ex)
        elif kind == 4:    # SEL
            res = np.where(self.preds[w, ins.sel_pred], R[w, ins.src1], self.operand_b(w, ins))
            self._write(w, ins.dst, res, ex)
        elif kind == 5:    # LDI
            self._write(w, ins.dst, self._imm_vec(ins.imm), ex)
        elif kind == 6:    # S2R
            sr = ins.special_reg
            if sr is None:
                self.set_trap(TrapKind.ILLEGAL_INSTRUCTION,
                              f"S2R of unknown special register {ins.src2}", dyn)
                return
            self._write(w, ins.dst, self.special_vector(w, sr, iss.cta_id), ex)
        elif kind == 7:    # load
            if not ex.any():
                return
            vals = self._access(iss.mem_space, R[w, ins.src1][ex], iss.smem_base, dyn)
            if vals is not None:
                self.regs[w, ins.dst][ex] = vals
        elif kind == 8:    # store
            if not ex.any():
                return
            self._access(iss.mem_space, R[w, ins.src1][ex], iss.smem_base, dyn,
                         store=R[w, ins.src2][ex])
        # control-class opcodes are handled in _control

    def _access(self, space: int, addr: np.ndarray, smem_base: int, dyn: int,
                store: np.ndarray | None = None) -> np.ndarray | None:
        if space == MemSpace.GLOBAL:
            mem, kind, limit = self.global_mem, TrapKind.BAD_GLOBAL_ADDR, self.config.global_mem_bytes
            phys = addr
        elif space == MemSpace.SHARED:
            mem, kind = self.shared_mem, TrapKind.BAD_SHARED_ADDR
            limit = self.cta_shared_bytes
            phys = addr.astype(np.uint64) + np.uint64(smem_base)
        elif space == MemSpace.CONSTANT:
            if store is not None:
                self.set_trap(TrapKind.BAD_CONST_ADDR, "store to constant memory", dyn)
                return None
            mem, kind, limit = self.constant_mem, TrapKind.BAD_CONST_ADDR, self.config.constant_mem_bytes
            phys = addr
        else:
            self.set_trap(TrapKind.ILLEGAL_INSTRUCTION, "memory operation without a memory space", dyn)
            return None
        bad = (addr & np.uint32(3)).astype(bool) | (addr >= np.uint32(limit))
        if space == MemSpace.SHARED:
            bad |= phys >= np.uint64(self.config.shared_mem_bytes)
        if bad.any():
            first = int(addr[bad][0])
            self.set_trap(kind, f"address 0x{first:08x}", dyn)
            return None
        idx = (phys >> 2).astype(np.intp)
        if store is not None:
            mem[idx] = store
            return None
        return mem[idx]

    def _control(self, w: int, ins: Instruction, ex: np.ndarray, pc: int) -> None:
        ws = self.warps[w]
        if ws is None or not ws.stack or ws.status is WarpStatus.FINISHED:
            return  # issued on an idle slot: data effects only
        op = ins.opcode
        stack = ws.stack
        top = stack[-1]
        if op is Opcode.BRA:
            taken = top.mask & lanes_to_mask(ex)
            nt = top.mask & ~taken
            if taken == 0:
                top.pc = pc + 1
            elif nt == 0:
                top.pc = ins.target
            else:
                r = ins.reconv
                if r is None:
                    stack[-1] = StackEntry(pc + 1, top.rpc, nt)
                    stack.append(StackEntry(ins.target, top.rpc, taken))
                else:
                    top.pc = r
                    if pc + 1 != r:
                        stack.append(StackEntry(pc + 1, r, nt))
                    if ins.target != r:
                        stack.append(StackEntry(ins.target, r, taken))
        elif op is Opcode.EXIT:
            top.pc = pc + 1
            gone = lanes_to_mask(ex)
            if gone:
                for e in stack:
                    e.mask &= ~gone
        else:
            top.pc = pc + 1
        while stack and (stack[-1].mask == 0 or stack[-1].pc == stack[-1].rpc):
            stack.pop()
        if not stack:
            ws.status = WarpStatus.FINISHED
            self._retire(ws)
            return
        if op is Opcode.BAR and ex.any():
            ws.status = WarpStatus.AT_BARRIER
            self._release_barrier(ws.cta_slot)

    def _release_barrier(self, cta_slot: int) -> None:
        cta = self.cta_slots[cta_slot]
        if cta is None:
            return
        live = [self.warps[i] for i in cta.warps
                if self.warps[i] is not None and self.warps[i].status is not WarpStatus.FINISHED]
        if live and all(x.status is WarpStatus.AT_BARRIER for x in live):
            for x in live:
                x.status = WarpStatus.READY

    def _retire(self, ws: WarpState) -> None:
        cta = self.cta_slots[ws.cta_slot]
        if cta is None:
            return
        if all(self.warps[i] is None or self.warps[i].status is WarpStatus.FINISHED
               for i in cta.warps):
            for i in cta.warps:
                self.warps[i] = None
            self.cta_slots[ws.cta_slot] = None
            self.finished_ctas.append(cta.cta_id)
            self._dispatch()
        else:
            self._release_barrier(ws.cta_slot)

    def _any_at_barrier(self) -> bool:
        return any(x is not None and x.status is WarpStatus.AT_BARRIER for x in self.warps)

    # -- driver ------------------------------------------------------------

    def run(self, golden_dyn_count: int | None = None, *, max_steps: int | None = None) -> RunOutcome:
        limit = None
        if golden_dyn_count is not None:
            limit = self.config.watchdog_factor * golden_dyn_count
        steps = 0
        with np.errstate(all="ignore"):
            while self.trap is None and not self.finished():
                if limit is not None and self.dyn_instr_count >= limit:
                    kind = (TrapKind.BARRIER_DEADLOCK if self._any_at_barrier()
                            else TrapKind.WATCHDOG_HANG)
                    self.set_trap(kind, f"exceeded {limit} dynamic instructions")
                    break
                if max_steps is not None and steps >= max_steps:
                    self.set_trap(TrapKind.WATCHDOG_HANG, f"exceeded {max_steps} steps")
                    break
                self.step()
                steps += 1
        status = RunStatus.COMPLETED if self.trap is None else RunStatus.TRAPPED
        return RunOutcome(status, self.dyn_instr_count, self.trap, self)

    def read_global(self, addr: int, count: int) -> np.ndarray:
        return self.global_mem[addr // 4: addr // 4 + count].copy()


# opcode -> execute kind
_KIND: dict[Opcode, int] = {}
for _op in Opcode:
    if _op in (Opcode.IADD, Opcode.ISUB, Opcode.IMUL, Opcode.AND, Opcode.OR, Opcode.XOR,
               Opcode.SHL, Opcode.SHR, Opcode.FADD, Opcode.FMUL):
        _KIND[_op] = 0
    elif _op in (Opcode.IMAD, Opcode.FFMA):
        _KIND[_op] = 1
    elif _op in (Opcode.MOV, Opcode.FRCP):
        _KIND[_op] = 2
    elif _op in (Opcode.ISETP, Opcode.FSETP):
        _KIND[_op] = 3
    elif _op is Opcode.SEL:
        _KIND[_op] = 4
    elif _op is Opcode.LDI:
        _KIND[_op] = 5
    elif _op is Opcode.S2R:
        _KIND[_op] = 6
    elif _op in LOAD_OPS:
        _KIND[_op] = 7
    elif _op in STORE_OPS:
        _KIND[_op] = 8
    else:
        _KIND[_op] = 9


def launch_kernel(config: SmConfig, program: KernelProgram, grid: int, block: int,
                  inputs: MemoryImage | None = None, **kwargs) -> Machine:
    """Create an SM state with the CTA table populated and the first CTAs resident."""
    return Machine(config, program, grid, block, inputs, **kwargs)


def read_special(state: Machine, warp_id: int, lane: int, which: SpecialReg) -> int:
    ws = state.warps[warp_id]
    if ws is None:
        raise ValueError(f"warp slot {warp_id} is empty")
    if not 0 <= lane < WARP_SIZE:
        raise ValueError(f"lane {lane} out of range")
    cta = state.cta_slots[ws.cta_slot]
    return int(state.special_vector(warp_id, which, cta.cta_id)[lane])


def run_program(config: SmConfig, program: KernelProgram, grid: int, block: int,
                inputs: MemoryImage | None = None, golden_dyn_count: int | None = None,
                **kwargs) -> RunOutcome:
    return launch_kernel(config, program, grid, block, inputs, **kwargs).run(golden_dyn_count)


def iter_steps(m: Machine, limit: int) -> Iterable[StepReport]:
    while m.trap is None and not m.finished() and m.dyn_instr_count < limit:
        yield m.step()
