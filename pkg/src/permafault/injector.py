"""Instruction-level permanent error models realized as machine hooks.

An :class:`ErrorDescriptor` selects the hardware scope (PPB, warps, lanes)
and the corruption parameters of one error model.  :class:`Injector` turns
it into a pre/post hook pair that corrupts every matching dynamic
instruction of a run, counting each activation.
"""

from __future__ import annotations

import dataclasses
import enum
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .isa import (
    BINARY_OPS, LOAD_OPS, SETP_OPS, STORE_OPS, TRUE_PRED, Instruction, MemSpace, OpClass,
    Opcode, SpecialReg,
)
from .machine import (
    WARP_SIZE, HookContext, HookSet, Machine, SmConfig, TrapKind, alu_eval, mask_to_lanes,
)
from .taxonomy import IPP_TARGETS, WARP_WIDE, ErrorModel

FULL = 0xFFFFFFFF


class IalMode(str, enum.Enum):
    DISABLE = "DISABLE"
    FORCE_ENABLE = "FORCE_ENABLE"


# opcodes an IOC replacement may swap between (same operand shape and class)
IOC_GROUPS: dict[OpClass, tuple[Opcode, ...]] = {
    OpClass.INT: (Opcode.IADD, Opcode.ISUB, Opcode.IMUL, Opcode.AND, Opcode.OR,
                  Opcode.XOR, Opcode.SHL, Opcode.SHR),
    OpClass.FP32: (Opcode.FADD, Opcode.FMUL),
}
MASK_MODELS = frozenset({ErrorModel.IRA, ErrorModel.IVRA, ErrorModel.IIO, ErrorModel.WV,
                          ErrorModel.IAT, ErrorModel.IAW, ErrorModel.IAC, ErrorModel.IMS,
                          ErrorModel.IMD})


@dataclass(frozen=True)
class ErrorDescriptor:
    model: ErrorModel
    warp_set: frozenset[int]
    thread_set: frozenset[int] = frozenset(range(WARP_SIZE))
    bit_err_mask: int = 0
    err_oper_loc: int = 0
    target_opcode_class: OpClass | None = None
    replacement_op: Opcode | None = None
    target_op: Opcode | None = None
    lane_id: int | None = None
    ial_mode: IalMode | None = None
    sr_dim: SpecialReg | None = None
    sm_id: int = 0
    ppb_id: int = 0
    seed: int = 0
    declared_model: ErrorModel | None = None

    def __post_init__(self) -> None:
        if self.model is ErrorModel.IPP:
            raise ValueError("IPP must be resolved to a concrete model (see resolve_ipp)")
        if not self.warp_set:
            raise ValueError("warp_set must be nonempty")
        if not self.thread_set or not all(0 <= t < WARP_SIZE for t in self.thread_set):
            raise ValueError("thread_set must be a nonempty set of lanes 0..31")
        if not 0 <= self.bit_err_mask <= FULL:
            raise ValueError("bit_err_mask must fit 32 bits")
        if not 0 <= self.err_oper_loc <= 3:
            raise ValueError("err_oper_loc must be 0..3")
        if self.model is ErrorModel.IOC:
            if self.replacement_op is None or self.target_opcode_class not in IOC_GROUPS:
                raise ValueError("IOC needs replacement_op and an INT/FP32 target class")
            group = IOC_GROUPS[self.target_opcode_class]
            if self.replacement_op not in group or (self.target_op is not None
                                                    and self.target_op not in group):
                raise ValueError("IOC replacement must share the target's class and arity")
        if self.model is ErrorModel.IVOC and self.target_opcode_class is None:
            raise ValueError("IVOC needs target_opcode_class")
        if self.model is ErrorModel.IAL:
            if self.lane_id is None or not 0 <= self.lane_id < WARP_SIZE or self.ial_mode is None:
                raise ValueError("IAL needs lane_id and ial_mode")
            if self.target_opcode_class not in (OpClass.INT, OpClass.FP32):
                raise ValueError("IAL target class must be INT or FP32")

    @property
    def imd_on_address(self) -> bool:
        """IMD corrupts the shared-memory address register for odd seeds, data otherwise."""
        return bool(self.seed & 1)

    @property
    def scope_lanes(self) -> frozenset[int]:
        if self.model in WARP_WIDE:
            return frozenset(range(WARP_SIZE))
        if self.model is ErrorModel.IAL:
            return frozenset({self.lane_id})
        lanes = set(self.thread_set)
        if self.model is ErrorModel.IAT and len(lanes) == WARP_SIZE:
            lanes.discard(max(lanes))  # keep one thread with its own index
        return frozenset(lanes)

    # ---- key=value serialization ---------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = ""
            elif isinstance(v, frozenset):
                s = ",".join(str(x) for x in sorted(v))
            elif isinstance(v, enum.Enum):
                s = v.name if isinstance(v, (Opcode, SpecialReg)) else v.value
            elif f.name == "bit_err_mask":
                s = f"0x{v:08x}"
            elif f.name == "seed":
                s = f"0x{v:016x}"
            else:
                s = str(v)
            lines.append(f"{f.name}={s}")
        return "\n".join(lines) + "\n"

    def to_inline(self) -> str:
        return ";".join(self.to_text().strip().splitlines())

    @classmethod
    def from_text(cls, text: str) -> "ErrorDescriptor":
        raw: dict[str, str] = {}
        for line in text.replace(";", "\n").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"descriptor line without '=': {line!r}")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown descriptor keys: {sorted(unknown)}")
        kw: dict = {}
        for k, v in raw.items():
            if v == "":
                continue
            if k in ("model", "declared_model"):
                kw[k] = ErrorModel(v)
            elif k in ("warp_set", "thread_set"):
                kw[k] = frozenset(int(x) for x in v.split(","))
            elif k == "target_opcode_class":
                kw[k] = OpClass(v)
            elif k in ("replacement_op", "target_op"):
                kw[k] = Opcode[v]
            elif k == "sr_dim":
                kw[k] = SpecialReg[v]
            elif k == "ial_mode":
                kw[k] = IalMode(v)
            else:
                kw[k] = int(v, 0)
        return cls(**kw)


def resolve_ipp(seed: int) -> ErrorModel:
    """The concrete model an IPP descriptor with this seed is realized by."""
    return IPP_TARGETS[seed % len(IPP_TARGETS)]


# --------------------------------------------------------------------------
# matching

def static_match(desc: ErrorDescriptor, ins: Instruction, regs_per_thread: int) -> bool:
    """Does the instruction belong to the model's trigger class?"""
    m = desc.model
    op = ins.opcode
    if m in (ErrorModel.IRA, ErrorModel.IVRA):
        reg = ins._regs.get(desc.err_oper_loc)
        if reg is None:
            return False
        wrong = reg ^ (desc.bit_err_mask & 0x1F)
        return wrong < regs_per_thread if m is ErrorModel.IRA else wrong >= regs_per_thread
    if m is ErrorModel.IIO:
        return ins.uses_imm_operand
    if m is ErrorModel.IMS:
        return op in LOAD_OPS and ins.mem_space in (MemSpace.SHARED, MemSpace.CONSTANT)
    if m is ErrorModel.IMD:
        return op in STORE_OPS and ins.mem_space is MemSpace.SHARED
    if m is ErrorModel.WV:
        return op in SETP_OPS and ins.pdst != TRUE_PRED and bool((desc.bit_err_mask >> ins.pdst) & 1)
    if m in (ErrorModel.IAT, ErrorModel.IAW):
        return op is Opcode.S2R and ins.special_reg is SpecialReg.SR_TID_X
    if m is ErrorModel.IAC:
        return op is Opcode.S2R and ins.special_reg is SpecialReg.SR_CTAID_X
    if m is ErrorModel.IOC:
        if desc.target_op is not None:
            return op is desc.target_op
        return op in IOC_GROUPS[desc.target_opcode_class]
    if m is ErrorModel.IVOC:
        return ins.op_class is desc.target_opcode_class
    if m is ErrorModel.IAL:
        return ins.op_class is desc.target_opcode_class and (ins.writes_register
                                                              or ins.writes_predicate)
    return False


def matches(desc: ErrorDescriptor, ins: Instruction, warp_id: int, lane: int, ppb_id: int,
            regs_per_thread: int = 32) -> bool:
    """Per-lane trigger predicate: PPB, warp scope, lane scope and instruction class."""
    return (ppb_id == desc.ppb_id and warp_id in desc.warp_set and lane in desc.scope_lanes
            and static_match(desc, ins, regs_per_thread))


# --------------------------------------------------------------------------
# hooks

class InjectorError(RuntimeError):
    pass


class Injector:
    """Hook pair realizing one descriptor on one machine instance."""

    def __init__(self, desc: ErrorDescriptor, config: SmConfig):
        self.desc = desc
        self.config = config
        self.regs = config.regs_per_thread
        self.activations = 0
        self.scratch: dict = {}
        self._armed = False
        self._scope = np.zeros(WARP_SIZE, bool)
        self._scope[sorted(desc.scope_lanes)] = True
        self._mask = np.uint32(desc.bit_err_mask)
        self._static: dict[Instruction, bool] = {}
        self._attached = False

    # -- plumbing ---------------------------------------------------------

    def hookset(self) -> HookSet:
        return HookSet([self._pre], [self._post])

    def attach(self, machine: Machine) -> None:
        if self._attached:
            raise InjectorError("injector already bound to a machine")
        existing = getattr(machine, "injector", None)
        if existing is not None:
            raise InjectorError("one error model per run: machine already has an injector")
        machine.injector = self
        machine.hooks = self.hookset()
        self._attached = True

    def _in_scope(self, ctx: HookContext) -> np.ndarray | None:
        d = self.desc
        if ctx.warp not in d.warp_set or ctx.warp % self.config.num_ppb != d.ppb_id:
            return None
        hit = self._static.get(ctx.instr)
        if hit is None:
            hit = static_match(d, ctx.instr, self.regs)
            self._static[ctx.instr] = hit
        if not hit:
            return None
        lanes = ctx.lanes & self._scope
        return lanes if lanes.any() else None

    def _pre(self, ctx: HookContext) -> None:
        lanes = self._in_scope(ctx)
        self._armed = lanes is not None
        if lanes is None:
            return
        self.activations += 1
        self._lanes = lanes
        getattr(self, "_pre_" + self.desc.model.value, _noop)(ctx, lanes)

    def _post(self, ctx: HookContext) -> None:
        if not self._armed:
            return
        self._armed = False
        lanes = self._lanes & ctx.executed
        getattr(self, "_post_" + self.desc.model.value, _noop)(ctx, lanes)
        self.scratch.clear()

    # -- IRA / IVRA --------------------------------------------------------

    def _wrong_reg(self, ins: Instruction) -> tuple[int, int]:
        reg = ins._regs[self.desc.err_oper_loc]
        return reg, reg ^ (self.desc.bit_err_mask & 0x1F)

    def _pre_IVRA(self, ctx: HookContext, lanes) -> None:
        reg, wrong = self._wrong_reg(ctx.instr)
        ctx.machine.set_trap(TrapKind.INVALID_REGISTER,
                             f"R{reg} redirected to R{wrong} >= {self.regs}", ctx.dyn_index)

    def _pre_IRA(self, ctx: HookContext, lanes) -> None:
        reg, wrong = self._wrong_reg(ctx.instr)
        R = ctx.machine.regs[ctx.warp]
        self.scratch["M"] = R[reg].copy()
        if self.desc.err_oper_loc != 0:
            # source mode: the instruction reads R_IR in place of R_src
            np.copyto(R[reg], R[wrong], where=lanes)

    def _post_IRA(self, ctx: HookContext, lanes) -> None:
        reg, wrong = self._wrong_reg(ctx.instr)
        R = ctx.machine.regs[ctx.warp]
        saved = self.scratch.pop("M")
        if self.desc.err_oper_loc == 0:
            result = R[reg].copy()
            R[reg] = saved
            np.copyto(R[wrong], result, where=lanes)
        elif ctx.instr._regs.get(0) == reg:
            # the instruction overwrote R_src with its result on executed lanes
            np.copyto(R[reg], saved, where=~ctx.executed)
        else:
            R[reg] = saved

    # -- S2R index corruption ---------------------------------------------

    def _xor_dst(self, ctx: HookContext, lanes) -> None:
        row = ctx.machine.regs[ctx.warp, ctx.instr.dst]
        np.copyto(row, row ^ self._mask, where=lanes)

    _post_IAT = _post_IAW = _post_IAC = _xor_dst

    # -- field masks ------------------------------------------------------

    def _post_IIO(self, ctx: HookContext, lanes) -> None:
        ins = ctx.instr
        if ins.writes_predicate:
            if ins.pdst != TRUE_PRED and self.desc.bit_err_mask & 1:
                p = ctx.machine.preds[ctx.warp, ins.pdst]
                np.copyto(p, ~p, where=lanes)
        else:
            self._xor_dst(ctx, lanes)

    _post_IMS = _xor_dst

    def _pre_IMD(self, ctx: HookContext, lanes) -> None:
        ins = ctx.instr
        reg = ins.src1 if self.desc.imd_on_address else ins.src2
        row = ctx.machine.regs[ctx.warp, reg]
        np.copyto(row, row ^ self._mask, where=ctx.guard() & lanes)

    def _post_WV(self, ctx: HookContext, lanes) -> None:
        p = ctx.machine.preds[ctx.warp, ctx.instr.pdst]
        np.copyto(p, ~p, where=lanes)

    # -- operation codes --------------------------------------------------

    def _pre_IOC(self, ctx: HookContext, lanes) -> None:
        m, w, ins = ctx.machine, ctx.warp, ctx.instr
        self.scratch["ops"] = (m.regs[w, ins.src1].copy(), m.operand_b(w, ins).copy())

    def _post_IOC(self, ctx: HookContext, lanes) -> None:
        a, b = self.scratch.pop("ops")
        row = ctx.machine.regs[ctx.warp, ctx.instr.dst]
        np.copyto(row, alu_eval(self.desc.replacement_op, a, b), where=lanes)

    def _pre_IVOC(self, ctx: HookContext, lanes) -> None:
        ctx.machine.set_trap(TrapKind.ILLEGAL_INSTRUCTION,
                             f"{ctx.instr.mnemonic} decoded to an invalid opcode", ctx.dyn_index)

    # -- lanes ------------------------------------------------------------

    def _pre_IAL(self, ctx: HookContext, lanes) -> None:
        m, w, ins = ctx.machine, ctx.warp, ctx.instr
        lane = self.desc.lane_id
        if self.desc.ial_mode is IalMode.DISABLE:
            if ins.writes_predicate:
                self.scratch["M"] = ("P", ins.pdst, bool(m.preds[w, ins.pdst, lane]))
            else:
                self.scratch["M"] = ("R", ins.dst, int(m.regs[w, ins.dst, lane]))
        elif ins.pred != TRUE_PRED and not ctx.guard()[lane]:
            m.preds[w, ins.pred, lane] = not m.preds[w, ins.pred, lane]

    def _post_IAL(self, ctx: HookContext, lanes) -> None:
        if self.desc.ial_mode is not IalMode.DISABLE:
            return
        kind, idx, value = self.scratch.pop("M")
        lane = self.desc.lane_id
        if kind == "P":
            ctx.machine.preds[ctx.warp, idx, lane] = value
        else:
            ctx.machine.regs[ctx.warp, idx, lane] = value


def _noop(ctx, lanes) -> None:
    return None


def build_injector(descriptors: Sequence[ErrorDescriptor], config: SmConfig) -> Injector:
    if len(descriptors) != 1:
        raise InjectorError(f"exactly one error model per run, got {len(descriptors)}")
    return Injector(descriptors[0], config)


def count_matching(desc: ErrorDescriptor, records: Iterable[tuple[int, Instruction, int]],
                   config: SmConfig) -> int:
    """Offline scan: dynamic instructions (warp, instr, issued mask) the model triggers on."""
    scope = 0
    for lane in desc.scope_lanes:
        scope |= 1 << lane
    n = 0
    for warp, ins, mask in records:
        if warp not in desc.warp_set or warp % config.num_ppb != desc.ppb_id:
            continue
        if mask & scope and static_match(desc, ins, config.regs_per_thread):
            n += 1
    return n


# --------------------------------------------------------------------------
# sampling

@dataclass(frozen=True)
class WorkloadMeta:
    """Static and golden-run facts the sampler draws from."""

    name: str
    warp_slots: tuple[int, ...]
    warps_per_cta: int
    grid: int
    regs_per_thread: int
    instructions: tuple[Instruction, ...]
    classes_every_warp: tuple[OpClass, ...]

    @classmethod
    def from_golden(cls, workload, config: SmConfig, trace_lines: Sequence[str]) -> "WorkloadMeta":
        prog = [i for i in workload.program.instructions() if isinstance(i, Instruction)]
        words = workload.program.words
        per_warp: dict[int, set[OpClass]] = {}
        from .isa import decode
        for line in trace_lines:
            f = dict(kv.split("=") for kv in line.split())
            ins = decode(words[int(f["pc"])])
            per_warp.setdefault(int(f["warp"]), set()).add(ins.op_class)
        common = set.intersection(*per_warp.values()) if per_warp else set()
        order = list(OpClass)
        return cls(workload.name, tuple(sorted(per_warp)), -(-workload.block // WARP_SIZE),
                   workload.grid, config.regs_per_thread, tuple(prog),
                   tuple(sorted(common, key=order.index)))


def _mask_bits(rng: random.Random, lo: int, hi: int) -> int:
    bits = list(range(lo, max(hi, lo + 1)))
    k = min(len(bits), rng.choice((1, 2)))
    m = 0
    for b in rng.sample(bits, k):
        m |= 1 << b
    return m


def sample_descriptor(model: ErrorModel, config: SmConfig, meta: WorkloadMeta,
                      seed: int) -> ErrorDescriptor:
    """Deterministic descriptor draw for (model, workload, seed)."""
    rng = random.Random(seed)
    declared = None
    if model is ErrorModel.IPP:
        declared = model
        model = resolve_ipp(seed)
    ppb0 = [w for w in meta.warp_slots if w % config.num_ppb == 0]
    warp = rng.choice(ppb0) if ppb0 else 0
    nthreads = rng.randint(1, 4)
    threads = frozenset(rng.sample(range(WARP_SIZE), nthreads))
    kw: dict = dict(model=model, warp_set=frozenset({warp}), thread_set=threads,
                    ppb_id=0, seed=seed, declared_model=declared)
    ins_list = meta.instructions
    if model in (ErrorModel.IRA, ErrorModel.IVRA):
        locs = sorted({loc for i in ins_list for loc in i._regs})
        loc = rng.choice(locs)
        mask = _mask_bits(rng, 0, 5)
        for _ in range(256):
            probe = ErrorDescriptor(model, frozenset({warp}), bit_err_mask=mask, err_oper_loc=loc)
            if any(static_match(probe, i, meta.regs_per_thread) for i in ins_list):
                break
            loc = rng.choice(locs)
            mask = _mask_bits(rng, 0, 5)
        kw.update(bit_err_mask=mask, err_oper_loc=loc)
    elif model is ErrorModel.IAT:
        kw.update(bit_err_mask=_mask_bits(rng, 0, 5), sr_dim=SpecialReg.SR_TID_X)
    elif model is ErrorModel.IAW:
        wbits = max(1, (meta.warps_per_cta - 1).bit_length())
        kw.update(bit_err_mask=_mask_bits(rng, 5, 5 + wbits), sr_dim=SpecialReg.SR_TID_X)
    elif model is ErrorModel.IAC:
        gbits = max(1, (meta.grid - 1).bit_length())
        kw.update(bit_err_mask=_mask_bits(rng, 0, gbits), sr_dim=SpecialReg.SR_CTAID_X)
    elif model is ErrorModel.WV:
        preds = sorted({i.pdst for i in ins_list if i.opcode in SETP_OPS and i.pdst != TRUE_PRED})
        if preds:
            k = min(len(preds), rng.choice((1, 2)))
            mask = sum(1 << p for p in rng.sample(preds, k))
        else:
            mask = _mask_bits(rng, 0, TRUE_PRED)
        kw.update(bit_err_mask=mask)
    elif model in (ErrorModel.IIO, ErrorModel.IMS, ErrorModel.IMD):
        kw.update(bit_err_mask=_mask_bits(rng, 0, 32))
    elif model is ErrorModel.IOC:
        present = sorted({i.opcode for i in ins_list if i.opcode in BINARY_OPS}, key=int)
        target = rng.choice(present) if present else Opcode.IADD
        cls = target.op_class
        repl = rng.choice([o for o in IOC_GROUPS[cls] if o is not target])
        kw.update(target_op=target, replacement_op=repl, target_opcode_class=cls)
    elif model is ErrorModel.IVOC:
        classes = meta.classes_every_warp or (OpClass.INT,)
        kw.update(target_opcode_class=rng.choice(classes))
    elif model is ErrorModel.IAL:
        present = [c for c in (OpClass.INT, OpClass.FP32)
                   if any(i.op_class is c for i in ins_list)]
        kw.update(target_opcode_class=rng.choice(present or [OpClass.INT]),
                  lane_id=rng.randrange(WARP_SIZE), ial_mode=rng.choice(list(IalMode)))
    return ErrorDescriptor(**kw)


def with_identity(desc: ErrorDescriptor) -> ErrorDescriptor:
    """The descriptor's no-op variant: zero mask, or replacement by the original opcode."""
    if desc.model is ErrorModel.IOC:
        return dataclasses.replace(desc, replacement_op=desc.target_op)
    if desc.model in MASK_MODELS:
        return dataclasses.replace(desc, bit_err_mask=0)
    raise ValueError(f"{desc.model.value} has no identity parameter")
