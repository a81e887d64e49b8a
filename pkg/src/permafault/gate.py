"""Stuck-at fault simulation on the bit-level unit models.

Per (site, workload) the classification proceeds in three stages, cheapest
first:

1. UNCONTROLLABLE when the golden latch value of the faulted bit already
   equals the stuck value on every cycle (the forced value is then a no-op).
2. HW_MASKED when re-evaluating the faulted unit on the golden inputs, at the
   cycles where the fault is active, never changes a unit output.  The unit
   state (round-robin pointer) stays golden as long as outputs match, so this
   replay is exact.  A stuck pointer bit is forced where the pointer is read,
   so it is handled like any other latch.
3. Otherwise the workload is re-executed with the faulted unit inline and a
   fault-free shadow evaluation on the same inputs.  A watchdog trap, barrier
   deadlock or persistent lack of a selectable warp is HW_HANG; anything else
   is SW_ERROR with the union of categories seen on differing outputs.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .asm import KernelProgram
from .isa import (
    BINARY_OPS, IMM_CAPABLE, SETP_OPS, STORE_OPS, TERNARY_OPS, VALID_CODES, Instruction,
    Opcode, SpecialReg, decode,
)
from .machine import Machine, SmConfig, TrapKind
from .taxonomy import ALL_MODELS, ErrorModel
from .units import (
    DECODER_OUTPUT_WIDTHS, FETCH_OUTPUT_WIDTHS, DecoderModel, DecoderOutputs, FaultSite,
    FetchModel, FetchOutputs, SingleUnitFrontend, Unit, UnitFrontend, UnitModel, WscModel,
    WscOutputs, decoded_instruction, pack_vector,
)

OPEN_UNMAPPED = "OPEN_UNMAPPED"


class FaultClass(str, enum.Enum):
    UNCONTROLLABLE = "UNCONTROLLABLE"
    HW_MASKED = "HW_MASKED"
    HW_HANG = "HW_HANG"
    SW_ERROR = "SW_ERROR"


# merge precedence across workloads, strongest first
CLASS_RANK = {FaultClass.SW_ERROR: 3, FaultClass.HW_HANG: 2, FaultClass.HW_MASKED: 1,
              FaultClass.UNCONTROLLABLE: 0}
HANG_TRAPS = (TrapKind.WATCHDOG_HANG, TrapKind.BARRIER_DEADLOCK)


def smem_bits(config: SmConfig) -> int:
    return max(1, (config.shared_mem_bytes - 1).bit_length())


def build_unit(unit: Unit, config: SmConfig, program: KernelProgram | None = None) -> UnitModel:
    n = config.max_resident_warps
    if unit is Unit.WSC:
        return WscModel(n, n, smem_bits(config))
    if unit is Unit.FETCH:
        return FetchModel(program.words if program is not None else (), n)
    return DecoderModel()


def enumerate_fault_sites(model: UnitModel) -> list[FaultSite]:
    """All stuck-at sites: signal name order, bit ascending, stuck-at-0 before 1."""
    return [FaultSite(model.unit, sig, b, s)
            for sig in model.signals for b in range(model.widths[sig]) for s in (0, 1)]


# --------------------------------------------------------------------------
# golden traces

@dataclass
class GoldenTrace:
    unit: Unit
    workload: str
    inputs: list
    outputs: list
    states: list[int] | None
    latches: dict[str, np.ndarray]
    opcodes: list[int]      # executing opcode per pattern, -1 when illegal
    warps: list[int]

    def __len__(self) -> int:
        return len(self.outputs)


@dataclass
class Profile:
    workload: str
    traces: dict[Unit, GoldenTrace]
    dyn_instr_count: int
    step_log: list[str]
    output: np.ndarray
    completed: bool


class _Recorder:
    def __init__(self) -> None:
        self.rows: dict[Unit, list] = {u: [] for u in Unit}

    def __call__(self, cycle: int, records: dict) -> None:
        for unit, rec in records.items():
            self.rows[unit].append(rec)

    def traces(self, workload: str) -> dict[Unit, GoldenTrace]:
        dec_rows = self.rows[Unit.DECODER]
        opcodes = [o.opcode if (o.op_valid and o.opcode in VALID_CODES) else -1
                   for _, o, _, _ in dec_rows]
        warps = [o.warp for _, o, _, _ in self.rows[Unit.FETCH]]
        out = {}
        for unit, rows in self.rows.items():
            names = list(rows[0][2]) if rows else []
            lat = {nm: np.array([r[2][nm] for r in rows], dtype=np.uint64) for nm in names}
            out[unit] = GoldenTrace(
                unit, workload, [r[0] for r in rows], [r[1] for r in rows],
                [r[3] for r in rows] if unit is Unit.WSC else None, lat, opcodes, warps)
        return out


def profile(workload, config: SmConfig | None = None, data=None) -> Profile:
    """Fault-free run with all three units evaluated bit-level; one pattern per issue."""
    rec = _Recorder()
    log: list[str] = []
    cfg = config or workload.config_for()
    m = workload.make_machine(cfg, data, trace=log,
                              frontend_factory=lambda mm: UnitFrontend(mm, observer=rec))
    outcome = m.run()
    return Profile(workload.name, rec.traces(workload.name), outcome.dyn_instr_count, log,
                   workload.read_output(m), outcome.completed)


def profile_workloads(workloads, config: SmConfig | None = None) -> dict[str, Profile]:
    """Profile a kernel set; a trap in any fault-free run is an error."""
    out = {}
    for w in workloads:
        p = profile(w, w.config_for(config))
        if not p.completed:
            raise RuntimeError(f"{w.name}: fault-free unit-level run trapped")
        out[w.name] = p
    return out


# binary framing ----------------------------------------------------------

TRACE_MAGIC = b"PFGT"
TRACE_VERSION = 1
_UNIT_CODE = {Unit.WSC: 0, Unit.FETCH: 1, Unit.DECODER: 2}


def _input_fields(unit: Unit, inp, state, n: int, sbits: int) -> tuple[list[int], tuple[int, ...]]:
    if unit is Unit.WSC:
        vals = [*inp.status, *inp.masks, *inp.warp_cta_slot, *inp.cta_ids, *inp.smem_bases,
                inp.lane_en, state]
        widths = (2,) * n + (32,) * n + (4,) * n + (8,) * len(inp.cta_ids) \
            + (sbits,) * len(inp.smem_bases) + (32, 4)
        return vals, widths
    if unit is Unit.FETCH:
        return [*inp.pcs, inp.warp, inp.valid], (16,) * len(inp.pcs) + (4, 1)
    return [inp], (32,)


def trace_bytes(trace: GoldenTrace, config: SmConfig) -> bytes:
    """Serialize: header, then fixed-width records (pattern, warp, opcode, in, out)."""
    n = config.max_resident_warps
    sbits = smem_bits(config)
    out_w = {Unit.WSC: (1, 4, 32, 32, 8, sbits), Unit.FETCH: FETCH_OUTPUT_WIDTHS,
             Unit.DECODER: DECODER_OUTPUT_WIDTHS}[trace.unit]
    if len(trace):
        _, in_w = _input_fields(trace.unit, trace.inputs[0],
                                trace.states[0] if trace.states else 0, n, sbits)
    else:
        in_w = ()
    in_bits, out_bits = sum(in_w), sum(out_w)
    in_bytes, out_bytes = -(-in_bits // 8), -(-out_bits // 8)
    parts = [TRACE_MAGIC, struct.pack("<BBHIHH", TRACE_VERSION, _UNIT_CODE[trace.unit], 0,
                                      len(trace), in_bits, out_bits)]
    for t in range(len(trace)):
        vals, _ = _input_fields(trace.unit, trace.inputs[t],
                                trace.states[t] if trace.states else 0, n, sbits)
        parts.append(struct.pack("<IBB", t, trace.warps[t] & 0xFF, trace.opcodes[t] & 0xFF))
        parts.append(pack_vector(vals, in_w).to_bytes(in_bytes, "little"))
        parts.append(pack_vector(trace.outputs[t], out_w).to_bytes(out_bytes, "little"))
    return b"".join(parts)


def write_trace(path: str | Path, trace: GoldenTrace, config: SmConfig) -> None:
    Path(path).write_bytes(trace_bytes(trace, config))


def read_trace_header(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != TRACE_MAGIC:
        raise ValueError(f"{path}: not a golden trace file")
    ver, unit, _, count, in_bits, out_bits = struct.unpack_from("<BBHIHH", data, 4)
    rec = 6 + -(-in_bits // 8) + -(-out_bits // 8)
    if len(data) != 16 + count * rec:
        raise ValueError(f"{path}: truncated trace")
    units = {v: k for k, v in _UNIT_CODE.items()}
    return {"version": ver, "unit": units[unit], "patterns": count,
            "input_bits": in_bits, "output_bits": out_bits}


# --------------------------------------------------------------------------
# output diff -> error categories

def _reg_cat(index: int, regs: int) -> str:
    return ErrorModel.IRA.value if index < regs else ErrorModel.IVRA.value


_S2R_CATEGORY = {
    SpecialReg.SR_TID_X: ErrorModel.IAT, SpecialReg.SR_LANEID: ErrorModel.IAT,
    SpecialReg.SR_CTAID_X: ErrorModel.IAC, SpecialReg.SR_NCTAID_X: ErrorModel.IAC,
    SpecialReg.SR_NTID_X: ErrorModel.IAW, SpecialReg.SR_WARPID: ErrorModel.IAW,
}


def _field_category(field_name: str, good: DecoderOutputs, bad: DecoderOutputs,
                    regs: int) -> str:
    """Category of a dst/src1/src2/aux difference given the fault-free instruction."""
    op = Opcode(good.opcode) if good.opcode in VALID_CODES else None
    value = getattr(bad, field_name)
    iio, wv = ErrorModel.IIO.value, ErrorModel.WV.value
    if op is Opcode.BRA:
        return wv  # target and reconvergence index
    if op is Opcode.LDI:
        return _reg_cat(value, regs) if field_name == "dst" else iio
    if op is Opcode.S2R and field_name == "src2":
        try:
            return _S2R_CATEGORY[SpecialReg(good.src2)].value
        except ValueError:
            return ErrorModel.IAW.value
    if op in SETP_OPS and field_name == "dst":
        return wv  # predicate destination and comparison
    if op is Opcode.SEL and field_name == "aux":
        return wv  # selector predicate
    if field_name in ("src2", "aux") and good.has_imm and op in IMM_CAPABLE:
        return iio
    if field_name == "aux":
        if op in TERNARY_OPS and (good.aux ^ bad.aux) & 0x1F:
            return _reg_cat(bad.aux & 0x1F, regs)
        return iio
    return _reg_cat(value, regs)


def classify_decoder_diff(good: DecoderOutputs, bad: DecoderOutputs, regs: int) -> set[str]:
    cats: set[str] = set()
    if good.opcode != bad.opcode or good.op_valid != bad.op_valid:
        still_valid = bool(bad.op_valid) and bad.opcode in VALID_CODES
        cats.add(ErrorModel.IOC.value if still_valid else ErrorModel.IVOC.value)
    if good.pred != bad.pred or good.pred_neg != bad.pred_neg:
        cats.add(ErrorModel.WV.value)
    if good.mem_space != bad.mem_space:
        op = Opcode(good.opcode) if good.opcode in VALID_CODES else None
        cats.add(ErrorModel.IMD.value if op in STORE_OPS else ErrorModel.IMS.value)
    if good.has_imm != bad.has_imm:
        cats.add(ErrorModel.IIO.value)
    for name in ("dst", "src1", "src2", "aux"):
        if getattr(good, name) != getattr(bad, name):
            cats.add(_field_category(name, good, bad, regs))
    return cats or {OPEN_UNMAPPED}


_DECODER = DecoderModel()


def classify_output_diff(unit: Unit, good, bad, regs_per_thread: int) -> set[str]:
    """Map a unit-output difference to the error categories it manifests as."""
    if good == bad:
        raise ValueError("outputs do not differ")
    if unit is Unit.WSC:
        g, b = WscOutputs(*good), WscOutputs(*bad)
        if g.valid != b.valid or g.warp != b.warp:
            return {ErrorModel.IAW.value}
        cats = set()
        if g.thread_mask != b.thread_mask:
            cats.add(ErrorModel.IAT.value)
        if g.lane_mask != b.lane_mask:
            cats.add(ErrorModel.IAL.value)
        if g.cta_id != b.cta_id:
            cats.add(ErrorModel.IAC.value)
        if g.smem_base != b.smem_base:
            cats.add(ErrorModel.IPP.value)
        return cats or {OPEN_UNMAPPED}
    if unit is Unit.FETCH:
        g, b = FetchOutputs(*good), FetchOutputs(*bad)
        if g.valid != b.valid or g.warp != b.warp:
            return {ErrorModel.IAW.value}
        if g.pc != b.pc:
            return {ErrorModel.WV.value}
        return classify_decoder_diff(_DECODER.eval(g.word), _DECODER.eval(b.word), regs_per_thread)
    return classify_decoder_diff(DecoderOutputs(*good), DecoderOutputs(*bad), regs_per_thread)


def _first_diff_bit(good, bad, names: Sequence[str]) -> tuple[str, int]:
    for nm, g, b in zip(names, good, bad):
        if g != b:
            x = int(g) ^ int(b)
            return nm, (x & -x).bit_length() - 1
    return "", -1


_OUT_NAMES = {Unit.WSC: WscOutputs._fields, Unit.FETCH: FetchOutputs._fields,
              Unit.DECODER: DecoderOutputs._fields}


# --------------------------------------------------------------------------
# fault simulation

@dataclass(frozen=True)
class WorkloadFaultResult:
    workload: str
    cls: FaultClass
    categories: frozenset[str] = frozenset()
    opcodes: frozenset[str] = frozenset()
    evidence: tuple | None = None      # (pattern index, output signal, bit)
    trap: str | None = None


@dataclass(frozen=True)
class GateFaultOutcome:
    site: FaultSite
    cls: FaultClass
    categories: frozenset[str]
    triggering_opcodes: frozenset[str]
    evidence: tuple | None            # (workload, pattern index, output signal, bit)
    per_workload: tuple[WorkloadFaultResult, ...] = field(default=(), compare=False)


@dataclass
class GateContext:
    """Everything needed to simulate faults against one workload."""

    workload: object
    config: SmConfig
    data: dict
    profile: Profile
    models: dict[Unit, UnitModel]

    @classmethod
    def build(cls, workload, base: SmConfig | None = None) -> "GateContext":
        cfg = workload.config_for(base)
        data = workload.make_inputs()
        prof = profile(workload, cfg, data)
        if not prof.completed:
            raise RuntimeError(f"{workload.name}: fault-free unit-level run trapped")
        models = {u: build_unit(u, cfg, workload.program) for u in Unit}
        return cls(workload, cfg, data, prof, models)


def _activated_cycles(trace: GoldenTrace, site: FaultSite) -> np.ndarray:
    vals = trace.latches.get(site.signal)
    if vals is None:
        raise ValueError(f"signal {site.signal} not present in the {trace.unit.value} trace")
    bits = (vals >> np.uint64(site.bit)) & np.uint64(1)
    return np.nonzero(bits != np.uint64(site.stuck))[0]


def _replay(site: FaultSite, trace: GoldenTrace, model: UnitModel,
            cycles: Iterable[int]) -> tuple[int, object] | None:
    """First pattern at which the faulted unit's outputs leave the golden ones."""
    force = model.forcer(site)
    unit = site.unit
    for t in cycles:
        t = int(t)
        if unit is Unit.WSC:
            out, _ = model.eval(trace.inputs[t], trace.states[t], force)
        else:
            out = model.eval(trace.inputs[t], force)
        if out != trace.outputs[t]:
            return t, out
    return None


class _DiffCollector:
    def __init__(self, unit: Unit, regs: int, words: Sequence[int]):
        self.unit = unit
        self.regs = regs
        self.words = words
        self.categories: set[str] = set()
        self.opcodes: set[str] = set()
        self.evidence: tuple | None = None
        self._seen: set = set()

    def _opcode_name(self, good, m) -> str:
        if self.unit is Unit.DECODER:
            op = good.opcode
        elif self.unit is Unit.FETCH:
            ins = decode(good.word)
            op = ins.opcode if isinstance(ins, Instruction) else -1
        else:
            ws = m.warps[good.warp] if good.valid and good.warp < len(m.warps) else None
            pc = ws.stack[-1].pc if ws is not None and ws.stack else None
            ins = decode(self.words[pc]) if pc is not None and pc < len(self.words) else None
            op = ins.opcode if isinstance(ins, Instruction) else -1
        return Opcode(op).name if op in VALID_CODES else "ILLEGAL"

    def __call__(self, cycle: int, good, bad, m) -> None:
        if good == bad:
            return
        key = (good, bad)
        if key in self._seen:
            return
        self._seen.add(key)
        if self.evidence is None:
            nm, bit = _first_diff_bit(good, bad, _OUT_NAMES[self.unit])
            self.evidence = (cycle, nm, bit)
        self.categories |= classify_output_diff(self.unit, good, bad, self.regs)
        self.opcodes.add(self._opcode_name(good, m))


def simulate_fault(site: FaultSite, ctx: GateContext) -> WorkloadFaultResult:
    """Classify one stuck-at site against one profiled workload."""
    trace = ctx.profile.traces[site.unit]
    model = ctx.models[site.unit]
    name = ctx.workload.name
    cycles = _activated_cycles(trace, site)
    if len(cycles) == 0:
        return WorkloadFaultResult(name, FaultClass.UNCONTROLLABLE)
    if _replay(site, trace, model, cycles) is None:
        return WorkloadFaultResult(name, FaultClass.HW_MASKED)

    col = _DiffCollector(site.unit, ctx.config.regs_per_thread, ctx.workload.program.words)
    m = ctx.workload.make_machine(
        ctx.config, ctx.data,
        frontend_factory=lambda mm: SingleUnitFrontend(mm, site, col))
    outcome = m.run(ctx.profile.dyn_instr_count)
    trap = outcome.trap.kind.value if outcome.trap else None
    if outcome.trap is not None and outcome.trap.kind in HANG_TRAPS:
        return WorkloadFaultResult(name, FaultClass.HW_HANG, frozenset(), frozenset(col.opcodes),
                                   col.evidence, trap)
    if not col.categories:
        raise AssertionError(f"{site} on {name}: replay diverged but the run showed no diff")
    return WorkloadFaultResult(name, FaultClass.SW_ERROR, frozenset(col.categories),
                               frozenset(col.opcodes), col.evidence, trap)


def merge_results(site: FaultSite, results: Sequence[WorkloadFaultResult]) -> GateFaultOutcome:
    """Combine per-workload classes: SW_ERROR > HW_HANG > HW_MASKED > UNCONTROLLABLE."""
    if not results:
        raise ValueError("no workload results to merge")
    best = max(results, key=lambda r: CLASS_RANK[r.cls])
    cls = best.cls
    cats: set[str] = set()
    ops: set[str] = set()
    if cls is FaultClass.SW_ERROR:
        for r in results:
            if r.cls is FaultClass.SW_ERROR:
                cats |= r.categories
                ops |= r.opcodes
    first = next(r for r in results if r.cls is cls)
    evidence = (first.workload, *first.evidence) if first.evidence else None
    return GateFaultOutcome(site, cls, frozenset(cats), frozenset(ops), evidence, tuple(results))


def simulate_site(site: FaultSite, contexts: Sequence[GateContext]) -> GateFaultOutcome:
    return merge_results(site, [simulate_fault(site, c) for c in contexts])


# --------------------------------------------------------------------------
# FAPR

@dataclass(frozen=True)
class FaprRow:
    unit: str
    category: str
    sites_total: int
    sites_in_category: int

    @property
    def fapr(self) -> float:
        return self.sites_in_category / self.sites_total if self.sites_total else 0.0


@dataclass(frozen=True)
class ClassSummary:
    unit: str
    sites_total: int
    counts: dict[str, int]

    def pct(self, cls: FaultClass) -> float:
        return 100.0 * self.counts.get(cls.value, 0) / self.sites_total if self.sites_total else 0.0


def compute_fapr(unit: Unit, outcomes: Sequence[GateFaultOutcome],
                 sites: Sequence[FaultSite] | None = None) -> tuple[list[FaprRow], ClassSummary]:
    """Per-category FAPR plus the four-class summary for one unit."""
    if sites is not None:
        got = [o.site for o in outcomes]
        if sorted(got) != sorted(sites) or len(set(got)) != len(got):
            raise ValueError(f"{unit.value}: outcomes do not cover the enumerated site list")
    total = len(outcomes)
    rows = []
    for model in ALL_MODELS:
        k = sum(1 for o in outcomes if model.value in o.categories)
        rows.append(FaprRow(unit.value, model.value, total, k))
    counts = {c.value: sum(1 for o in outcomes if o.cls is c) for c in FaultClass}
    return rows, ClassSummary(unit.value, total, counts)
