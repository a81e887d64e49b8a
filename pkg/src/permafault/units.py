"""Bit-level models of the warp scheduler controller, fetch unit and decoder.

Each unit is a set of named latches.  One evaluation per issue cycle computes
every latch from the unit inputs and (for the scheduler) its round-robin
pointer state; a stuck-at fault forces one latch bit right after the latch is
computed, so downstream logic in the same cycle sees the forced value.

Signal names carry zero-padded indices (``status[03]``) so lexicographic order
matches numeric order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

from .asm import KernelProgram
from .isa import (
    FIELDS, ILLEGAL_WORD, OP_MEM_SPACE, VALID_CODES, IllegalInstruction, Instruction,
    MemSpace, Opcode, encode_fields,
)


class Unit(str, enum.Enum):
    WSC = "WSC"
    FETCH = "FETCH"
    DECODER = "DECODER"


@dataclass(frozen=True, order=True)
class FaultSite:
    unit: Unit
    signal: str
    bit: int
    stuck: int

    def __str__(self) -> str:
        return f"{self.unit.value}:{self.signal}[{self.bit}]/sa{self.stuck}"


class _Forcer:
    """Applies at most one stuck-at fault to latch values as they are written."""

    __slots__ = ("signal", "set_mask", "clear_mask")

    def __init__(self, fault: FaultSite | None):
        if fault is None:
            self.signal = None
            self.set_mask = 0
            self.clear_mask = -1
        else:
            self.signal = fault.signal
            b = 1 << fault.bit
            self.set_mask = b if fault.stuck else 0
            self.clear_mask = -1 if fault.stuck else ~b

    def __call__(self, name: str, value: int) -> int:
        if name == self.signal:
            return (value | self.set_mask) & self.clear_mask
        return value


NO_FAULT = _Forcer(None)


class UnitModel:
    """Base class: a named bit map plus an eval function."""

    unit: Unit
    widths: dict[str, int]

    @property
    def signals(self) -> list[str]:
        return sorted(self.widths)

    @property
    def bit_count(self) -> int:
        return sum(self.widths.values())

    def forcer(self, fault: FaultSite | None) -> _Forcer:
        if fault is None:
            return NO_FAULT
        if fault.unit is not self.unit:
            raise ValueError(f"fault {fault} does not belong to {self.unit.value}")
        w = self.widths.get(fault.signal)
        if w is None or not 0 <= fault.bit < w or fault.stuck not in (0, 1):
            raise ValueError(f"invalid fault site {fault}")
        return _Forcer(fault)


def _idx(name: str, i: int) -> str:
    return f"{name}[{i:02d}]"


# --------------------------------------------------------------------------
# warp scheduler controller

class WscInputs(NamedTuple):
    status: tuple[int, ...]         # per warp slot, 2-bit status code (3 = finished/empty)
    masks: tuple[int, ...]          # per warp slot, active thread mask
    warp_cta_slot: tuple[int, ...]  # per warp slot, CTA slot index
    cta_ids: tuple[int, ...]        # per CTA slot
    smem_bases: tuple[int, ...]     # per CTA slot, shared-memory byte offset
    lane_en: int


class WscOutputs(NamedTuple):
    valid: int
    warp: int
    thread_mask: int
    lane_mask: int
    cta_id: int
    smem_base: int


WSC_OUTPUT_WIDTHS = (1, 4, 32, 32, 8, 14)
STATUS_READY = 0


class WscModel(UnitModel):
    unit = Unit.WSC
    CTA_ID_BITS = 8
    PTR_BITS = 4

    def __init__(self, num_warps: int, num_cta_slots: int, smem_bits: int = 14):
        if not 0 < num_warps <= 16:
            raise ValueError("the scheduler model supports 1..16 warp slots")
        self.n = num_warps
        self.c = num_cta_slots
        self.smem_bits = smem_bits
        self.status_names = [_idx("status", w) for w in range(num_warps)]
        self.cta_names = [_idx("cta_id", c) for c in range(num_cta_slots)]
        self.smem_names = [_idx("smem_base", c) for c in range(num_cta_slots)]
        self.widths = {"rr_ptr": self.PTR_BITS, "sel_valid": 1, "warp_sel": 4,
                       "thread_mask": 32, "lane_en": 32}
        for nm in self.status_names:
            self.widths[nm] = 2
        for nm in self.cta_names:
            self.widths[nm] = self.CTA_ID_BITS
        for nm in self.smem_names:
            self.widths[nm] = smem_bits
        self.output_widths = (1, 4, 32, 32, self.CTA_ID_BITS, smem_bits)

    def eval(self, inp: WscInputs, rr_state: int, force: _Forcer = NO_FAULT,
             latches: dict | None = None) -> tuple[WscOutputs, int]:
        """One scheduling cycle.

        ``rr_state`` is the pointer value written last cycle (the last issued
        warp, reset 0).  The ``rr_ptr`` latch is the value read this cycle, so
        a stuck pointer bit is forced where the pointer is consumed.
        """
        n = self.n
        rr_ptr = force("rr_ptr", rr_state)
        status = [force(nm, s) for nm, s in zip(self.status_names, inp.status)]
        start = rr_ptr + 1
        found = 0
        sel = 0
        for k in range(n):
            w = (start + k) % n
            if status[w] == STATUS_READY:
                found, sel = 1, w
                break
        valid = force("sel_valid", found)
        warp = force("warp_sel", sel)
        new_state = warp if valid else rr_state
        tmask = force("thread_mask", inp.masks[warp] if warp < n else 0)
        lane_en = force("lane_en", inp.lane_en)
        cta = [force(nm, v & 0xFF) for nm, v in zip(self.cta_names, inp.cta_ids)]
        smem = [force(nm, v) for nm, v in zip(self.smem_names, inp.smem_bases)]
        slot = inp.warp_cta_slot[warp] if warp < n else 0
        if latches is not None:
            latches.update(zip(self.status_names, status))
            latches.update(zip(self.cta_names, cta))
            latches.update(zip(self.smem_names, smem))
            latches.update(rr_ptr=rr_ptr, sel_valid=valid, warp_sel=warp,
                           thread_mask=tmask, lane_en=lane_en)
        out = WscOutputs(valid, warp, tmask, lane_en, cta[slot], smem[slot])
        return out, new_state


# --------------------------------------------------------------------------
# fetch

class FetchInputs(NamedTuple):
    pcs: tuple[int, ...]   # per warp slot
    warp: int
    valid: int


class FetchOutputs(NamedTuple):
    valid: int
    warp: int
    pc: int
    word: int


FETCH_OUTPUT_WIDTHS = (1, 4, 16, 32)


class FetchModel(UnitModel):
    unit = Unit.FETCH

    def __init__(self, program: KernelProgram | tuple[int, ...], num_warps: int):
        self.words = tuple(program.words if isinstance(program, KernelProgram) else program)
        self.n = num_warps
        self.pc_names = [_idx("pc", w) for w in range(num_warps)]
        self.widths = {"warp_sel": 4, "valid": 1, "word": 32}
        for nm in self.pc_names:
            self.widths[nm] = 16
        self.output_widths = FETCH_OUTPUT_WIDTHS

    def eval(self, inp: FetchInputs, force: _Forcer = NO_FAULT,
             latches: dict | None = None) -> FetchOutputs:
        pcs = [force(nm, p & 0xFFFF) for nm, p in zip(self.pc_names, inp.pcs)]
        warp = force("warp_sel", inp.warp)
        valid = force("valid", inp.valid)
        pc = pcs[warp] if warp < self.n else 0
        if not valid:
            word = 0
        elif pc < len(self.words):
            word = self.words[pc]
        else:
            word = ILLEGAL_WORD
        word = force("word", word)
        if latches is not None:
            latches.update(zip(self.pc_names, pcs))
            latches.update(warp_sel=warp, valid=valid, word=word)
        return FetchOutputs(valid, warp, pc, word)


# --------------------------------------------------------------------------
# decoder

class DecoderOutputs(NamedTuple):
    opcode: int
    pred: int
    pred_neg: int
    dst: int
    src1: int
    src2: int
    has_imm: int
    aux: int
    mem_space: int
    op_valid: int


DECODER_OUTPUT_WIDTHS = tuple(w for _, _, w in FIELDS) + (2, 1)
_FIELD_SIGNALS = tuple((f"out_{name}", lsb, (1 << width) - 1) for name, lsb, width in FIELDS)
_MEM_SPACE_OF = {int(op): int(ms) for op, ms in OP_MEM_SPACE.items()}


class DecoderModel(UnitModel):
    unit = Unit.DECODER

    def __init__(self) -> None:
        self.widths = {"in_word": 32, "mem_space": 2, "op_valid": 1}
        for name, _, width in FIELDS:
            self.widths[f"out_{name}"] = width
        self.output_widths = DECODER_OUTPUT_WIDTHS

    def eval(self, word: int, force: _Forcer = NO_FAULT,
             latches: dict | None = None) -> DecoderOutputs:
        w = force("in_word", word)
        vals = [force(nm, (w >> lsb) & m) for nm, lsb, m in _FIELD_SIGNALS]
        op = vals[0]
        ms = force("mem_space", _MEM_SPACE_OF.get(op, 0))
        ok = force("op_valid", 1 if op in VALID_CODES else 0)
        if latches is not None:
            latches["in_word"] = w
            latches.update(zip((nm for nm, _, _ in _FIELD_SIGNALS), vals))
            latches["mem_space"] = ms
            latches["op_valid"] = ok
        return DecoderOutputs(*vals, ms, ok)


_INSTR_CACHE: dict[DecoderOutputs, Instruction | IllegalInstruction] = {}


def decoded_instruction(out: DecoderOutputs) -> Instruction | IllegalInstruction:
    """The instruction the execute stage sees for a set of decoder outputs."""
    ins = _INSTR_CACHE.get(out)
    if ins is None:
        if out.op_valid and out.opcode in VALID_CODES:
            ins = Instruction(Opcode(out.opcode), out.pred, bool(out.pred_neg), out.dst,
                              out.src1, out.src2, bool(out.has_imm), out.aux)
        else:
            ins = IllegalInstruction(encode_fields(*out[:8]))
        if len(_INSTR_CACHE) < 1 << 16:
            _INSTR_CACHE[out] = ins
    return ins


def decode_reference(word: int) -> DecoderOutputs:
    return DecoderModel().eval(word)


def pack_vector(values: tuple[int, ...] | list[int], widths: tuple[int, ...]) -> int:
    """Concatenate fields (first field least significant) into one bit vector."""
    v = 0
    shift = 0
    for x, w in zip(values, widths):
        v |= (int(x) & ((1 << w) - 1)) << shift
        shift += w
    return v


# --------------------------------------------------------------------------
# machine front end built from the three units

class UnitFrontend:
    """Scheduler, fetch and decoder units evaluated bit-level every cycle.

    ``fault`` (optional) is forced inside its unit.  ``observer`` (optional)
    is called once per cycle with ``(cycle, records)`` where ``records`` maps
    each unit to ``(inputs, outputs, latches, state_before)``; only units listed
    in ``observe`` are evaluated with latch capture.  ``shadow`` (optional) is
    called per cycle with the fault-free outputs of the faulted unit computed
    on the same inputs and state.
    """

    def __init__(self, machine, fault: FaultSite | None = None, *, observer=None,
                 shadow=None):
        n = machine.num_slots
        self.n = n
        smem_bits = max(1, (machine.config.shared_mem_bytes - 1).bit_length())
        self.wsc = WscModel(n, machine.num_cta_slots, smem_bits)
        self.fetch = FetchModel(machine.program, n)
        self.dec = DecoderModel()
        self.fault = fault
        self.f_wsc = self.wsc.forcer(fault) if fault and fault.unit is Unit.WSC else NO_FAULT
        self.f_fetch = self.fetch.forcer(fault) if fault and fault.unit is Unit.FETCH else NO_FAULT
        self.f_dec = self.dec.forcer(fault) if fault and fault.unit is Unit.DECODER else NO_FAULT
        self.rr_ptr = 0
        self.observer = observer
        self.shadow = shadow
        self.cycle = 0
        if machine.grid > 256:
            raise ValueError("the scheduler model holds 8-bit CTA ids (grid <= 256)")

    @staticmethod
    def wsc_inputs(m) -> WscInputs:
        status, masks, slots = [], [], []
        for ws in m.warps:
            if ws is None:
                status.append(3)
                masks.append(0)
                slots.append(0)
            else:
                status.append(int(ws.status))
                masks.append(ws.stack[-1].mask if ws.stack else 0)
                slots.append(ws.cta_slot)
        cids, bases = [], []
        for c in m.cta_slots:
            cids.append(c.cta_id if c is not None else 0)
            bases.append(c.smem_base if c is not None else 0)
        return WscInputs(tuple(status), tuple(masks), tuple(slots), tuple(cids),
                         tuple(bases), 0xFFFFFFFF)

    @staticmethod
    def pcs(m) -> tuple[int, ...]:
        return tuple(ws.stack[-1].pc if ws is not None and ws.stack else 0 for ws in m.warps)

    def issue(self, m):
        from .machine import Issue  # local import avoids a cycle

        cyc = self.cycle
        self.cycle += 1
        obs = self.observer
        lat_w = {} if obs else None
        lat_f = {} if obs else None
        lat_d = {} if obs else None
        fault_unit = self.fault.unit if self.fault else None

        wi = self.wsc_inputs(m)
        rr_before = self.rr_ptr
        wo, self.rr_ptr = self.wsc.eval(wi, rr_before, self.f_wsc, lat_w)
        if fault_unit is Unit.WSC and self.shadow:
            good, _ = self.wsc.eval(wi, rr_before)
            self.shadow(cyc, good, wo, m)

        fi = FetchInputs(self.pcs(m), wo.warp, wo.valid)
        fo = self.fetch.eval(fi, self.f_fetch, lat_f)
        if fault_unit is Unit.FETCH and self.shadow:
            self.shadow(cyc, self.fetch.eval(fi), fo, m)

        do = self.dec.eval(fo.word, self.f_dec, lat_d)
        if fault_unit is Unit.DECODER and self.shadow:
            self.shadow(cyc, self.dec.eval(fo.word), do, m)

        if obs:
            obs(cyc, {Unit.WSC: (wi, wo, lat_w, rr_before), Unit.FETCH: (fi, fo, lat_f, None),
                      Unit.DECODER: (fo.word, do, lat_d, None)})
        if not fo.valid or fo.warp >= self.n:
            return None
        ins = decoded_instruction(do)
        return Issue(fo.warp, fo.pc, fo.word, ins, do.mem_space, wo.thread_mask,
                     wo.lane_mask, wo.cta_id, wo.smem_base)


class SingleUnitFrontend:
    """Fault-free direct front end with exactly one unit evaluated bit-level.

    Used for fault simulation: the faulted unit runs its bit-level model with
    the fault forced (plus a fault-free shadow evaluation for comparison) while
    the other two units take the fast path.  Equivalent to
    :class:`UnitFrontend` because the fault-free unit models agree with the
    direct path (checked by the null-fault tests).
    """

    def __init__(self, machine, fault: FaultSite, shadow):
        n = machine.num_slots
        self.n = n
        self.unit = fault.unit
        self.shadow = shadow
        self.cycle = 0
        self.words = machine.program.words
        self.decoded = [decoded_instruction(decode_reference(w)) for w in self.words]
        self._dec_cache: dict[int, tuple] = {}
        if fault.unit is Unit.WSC:
            smem_bits = max(1, (machine.config.shared_mem_bytes - 1).bit_length())
            self.model = WscModel(n, machine.num_cta_slots, smem_bits)
        elif fault.unit is Unit.FETCH:
            self.model = FetchModel(machine.program, n)
        else:
            self.model = DecoderModel()
        self.force = self.model.forcer(fault)
        self.rr_ptr = 0

    def _decode(self, word: int):
        r = self._dec_cache.get(word)
        if r is None:
            out = decode_reference(word)
            r = (decoded_instruction(out), out.mem_space)
            self._dec_cache[word] = r
        return r

    def issue(self, m):
        from .machine import FULL_MASK, Issue, WarpStatus

        cyc = self.cycle
        self.cycle += 1
        n = self.n
        unit = self.unit
        if unit is Unit.WSC:
            wi = UnitFrontend.wsc_inputs(m)
            before = self.rr_ptr
            wo, self.rr_ptr = self.model.eval(wi, before, self.force)
            good, _ = self.model.eval(wi, before)
            self.shadow(cyc, good, wo, m)
            valid, warp = wo.valid, wo.warp
            tmask, lmask, cta_id, smem = wo.thread_mask, wo.lane_mask, wo.cta_id, wo.smem_base
        else:
            warps = m.warps
            start = self.rr_ptr + 1
            valid, warp = 0, 0
            for k in range(n):
                w = (start + k) % n
                ws = warps[w]
                if ws is not None and ws.status is WarpStatus.READY:
                    valid, warp = 1, w
                    break
            if valid:
                self.rr_ptr = warp
                ws = warps[warp]
                tmask = ws.stack[-1].mask
                cta = m.cta_slots[ws.cta_slot]
                cta_id, smem = cta.cta_id, cta.smem_base
            else:
                tmask, cta_id, smem = 0, 0, 0
            lmask = FULL_MASK
        if unit is Unit.FETCH:
            fi = FetchInputs(UnitFrontend.pcs(m), warp, valid)
            fo = self.model.eval(fi, self.force)
            self.shadow(cyc, self.model.eval(fi), fo, m)
            valid, warp, pc, word = fo
            if not valid or warp >= n:
                return None
            ins, ms = self._decode(word)
        else:
            if not valid or warp >= n:
                return None
            ws = m.warps[warp]
            pc = ws.stack[-1].pc if ws is not None and ws.stack else 0
            word = self.words[pc] if pc < len(self.words) else ILLEGAL_WORD
            if unit is Unit.DECODER:
                do = self.model.eval(word, self.force)
                self.shadow(cyc, self.model.eval(word), do, m)
                ins, ms = decoded_instruction(do), do.mem_space
            elif pc < len(self.words):
                ins = self.decoded[pc]
                ms = int(OP_MEM_SPACE.get(ins.opcode, MemSpace.NONE)) if isinstance(ins, Instruction) else 0
            else:
                ins, ms = self._decode(word)
        return Issue(warp, pc, word, ins, ms, tmask, lmask, cta_id, smem)
