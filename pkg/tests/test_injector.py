from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from permafault.asm import assemble
from permafault.campaign import Outcome, audit_permanence, run_golden, run_injection
from permafault.injector import (
    ErrorDescriptor, IalMode, Injector, InjectorError, WorkloadMeta, build_injector, matches,
    resolve_ipp, sample_descriptor, static_match, with_identity,
)
from permafault.isa import (
    Instruction, OpClass, Opcode, SpecialReg, decode, encode, make_alu,
)
from permafault.machine import Machine, SmConfig, TrapKind
from permafault.taxonomy import ALL_MODELS, IPP_TARGETS, ErrorModel
from permafault.workloads import BUFFER_BASE, SENTINEL, Buffer, Workload, get_workload

CFG = SmConfig()
ALL_LANES = frozenset(range(32))
W0 = frozenset({0})


def desc(model, **kw):
    kw.setdefault("warp_set", W0)
    return ErrorDescriptor(model, **kw)


def ins(text: str) -> Instruction:
    return decode(assemble(text + "\nEXIT").words[0])


def run_kernel(src, d, *, block=32, regs=None, golden=None, config=CFG, shared=0):
    m = Machine(config, assemble(src), 1, block, shared_bytes=shared)
    for (w, r), v in (regs or {}).items():
        m.regs[w, r] = v
    inj = Injector(d, config)
    inj.attach(m)
    return m, m.run(golden), inj


# ---- matching ------------------------------------------------------------

def test_iio_matches_only_immediate_forms():
    d = desc(ErrorModel.IIO, bit_err_mask=1)
    assert matches(d, ins("IADD R1, R2, #4"), 0, 0, 0)
    assert not matches(d, ins("IADD R1, R2, R3"), 0, 0, 0)


def test_imd_matches_shared_stores_only():
    d = desc(ErrorModel.IMD, bit_err_mask=1)
    assert not matches(d, ins("STG [R1], R2"), 0, 0, 0)
    assert matches(d, ins("STS [R1], R2"), 0, 0, 0)


def test_warp_scope():
    d = desc(ErrorModel.IIO, bit_err_mask=1, warp_set=frozenset({1, 2}))
    assert not matches(d, ins("IADD R1, R2, #4"), 3, 0, 0)
    assert matches(d, ins("IADD R1, R2, #4"), 2, 0, 0)
    assert not matches(d, ins("IADD R1, R2, #4"), 2, 0, 1)


def test_thread_scope_rule():
    narrow = frozenset({3})
    iat = desc(ErrorModel.IAT, bit_err_mask=1, thread_set=narrow)
    iaw = desc(ErrorModel.IAW, bit_err_mask=32, thread_set=narrow)
    s2r = ins("S2R R0, SR_TID_X")
    assert matches(iat, s2r, 0, 3, 0) and not matches(iat, s2r, 0, 4, 0)
    assert matches(iaw, s2r, 0, 4, 0)  # warp-wide model ignores thread_set
    assert not matches(iat, ins("S2R R0, SR_CTAID_X"), 0, 3, 0)
    assert matches(desc(ErrorModel.IAC, bit_err_mask=1), ins("S2R R0, SR_CTAID_X"), 0, 0, 0)


def test_iat_keeps_one_lane():
    d = desc(ErrorModel.IAT, bit_err_mask=1, thread_set=ALL_LANES)
    assert d.scope_lanes == frozenset(range(31))


def test_ira_validity_filter():
    i = ins("IADD R1, R2, R3")
    assert static_match(desc(ErrorModel.IRA, bit_err_mask=8), i, 16)        # R1 -> R9
    assert not static_match(desc(ErrorModel.IRA, bit_err_mask=16), i, 16)   # R1 -> R17
    assert static_match(desc(ErrorModel.IVRA, bit_err_mask=16), i, 16)


def test_wv_selects_predicates_by_mask():
    setp = ins("ISETP.LT P2, R1, R2")
    assert matches(desc(ErrorModel.WV, bit_err_mask=0b100), setp, 0, 0, 0)
    assert not matches(desc(ErrorModel.WV, bit_err_mask=0b010), setp, 0, 0, 0)


# ---- register addressing ----------------------------------------------

def test_ira_dst_mode_hand_trace():
    src = "IADD R1, R2, R3\nSTG [R4], R1\nEXIT"
    d = desc(ErrorModel.IRA, bit_err_mask=8, err_oper_loc=0)   # R1 -> R9
    m, out, inj = run_kernel(src, d, regs={(0, 1): 0x55, (0, 2): 2, (0, 3): 5, (0, 4): 0x2000})
    assert out.completed
    assert (m.regs[0, 1] == 0x55).all()
    assert (m.regs[0, 9] == 7).all()
    assert m.read_global(0x2000, 1)[0] == 0x55
    assert inj.activations == 1 and not inj.scratch


def test_ira_src_mode_reads_wrong_register_and_restores():
    src = "IADD R1, R2, R3\nEXIT"
    d = desc(ErrorModel.IRA, bit_err_mask=4, err_oper_loc=1)   # src1 R2 -> R6
    m, out, _ = run_kernel(src, d, regs={(0, 2): 2, (0, 3): 5, (0, 6): 100})
    assert (m.regs[0, 1] == 105).all()
    assert (m.regs[0, 2] == 2).all()


def test_ira_zero_mask_is_identity():
    src = "IADD R1, R2, R3\nEXIT"
    m, _, _ = run_kernel(src, desc(ErrorModel.IRA, bit_err_mask=0), regs={(0, 2): 2, (0, 3): 5})
    assert (m.regs[0, 1] == 7).all()


def test_ivra_traps():
    cfg = dataclasses.replace(CFG, regs_per_thread=16)
    d = desc(ErrorModel.IVRA, bit_err_mask=16)
    _, out, inj = run_kernel("IADD R1, R2, R3\nEXIT", d, config=cfg)
    assert out.trap.kind is TrapKind.INVALID_REGISTER and inj.activations == 1


# ---- thread, warp and CTA indexes ---------------------------------------

@pytest.fixture(scope="module")
def vadd():
    return run_golden("vectoradd_int")


def test_iat_single_thread_on_vectoradd(vadd):
    d = desc(ErrorModel.IAT, bit_err_mask=0x8, thread_set=frozenset({0}),
             sr_dim=SpecialReg.SR_TID_X)
    rec = run_injection(vadd, d)
    assert rec.outcome is Outcome.SDC
    assert rec.sdc_count == 1 and rec.first_bad_index == 0


def test_iac_cta0_recomputes_cta1(vadd):
    trace = []
    d = desc(ErrorModel.IAC, bit_err_mask=1, warp_set=frozenset({0, 1, 2, 3}),
             thread_set=ALL_LANES, sr_dim=SpecialReg.SR_CTAID_X)
    inj = Injector(d, vadd.config)
    m = vadd.workload.make_machine(vadd.config, vadd.data)
    inj.attach(m)
    assert m.run(vadd.dyn_instr_count).completed
    out = vadd.workload.read_output(m)
    assert (out[:128] == SENTINEL).all()
    assert np.array_equal(out[128:], vadd.output[128:])


# ---- lanes ---------------------------------------------------------------

def test_ial_disable_lane5(vadd):
    d = desc(ErrorModel.IAL, warp_set=frozenset(range(8)), lane_id=5, ial_mode=IalMode.DISABLE,
             target_opcode_class=OpClass.INT)
    inj = Injector(d, vadd.config)
    m = vadd.workload.make_machine(vadd.config, vadd.data)
    inj.attach(m)
    assert m.run(vadd.dyn_instr_count).completed
    diff = np.flatnonzero(vadd.workload.read_output(m) != vadd.output)
    assert diff.tolist() == [i for i in range(256) if i % 32 == 5]


def test_ial_force_enable_without_predicated_off_int_is_masked(vadd):
    d = desc(ErrorModel.IAL, lane_id=3, ial_mode=IalMode.FORCE_ENABLE,
             target_opcode_class=OpClass.INT)
    assert run_injection(vadd, d).outcome is Outcome.MASKED


def test_ial_fp32_on_integer_kernel_is_masked(vadd):
    d = desc(ErrorModel.IAL, lane_id=3, ial_mode=IalMode.DISABLE,
             target_opcode_class=OpClass.FP32)
    rec = run_injection(vadd, d)
    assert rec.outcome is Outcome.MASKED and rec.activations == 0


def test_ial_force_enable_executes_guarded_lane():
    src = "S2R R0, SR_TID_X\nISETP.LT P0, R0, #1\n@P0 IADD R1, R0, #9\nEXIT"
    d = desc(ErrorModel.IAL, lane_id=4, ial_mode=IalMode.FORCE_ENABLE,
             target_opcode_class=OpClass.INT)
    m, out, _ = run_kernel(src, d)
    assert m.regs[0, 1, 4] == 13 and m.regs[0, 1, 0] == 9 and m.regs[0, 1, 5] == 0


# ---- field masks ---------------------------------------------------------

# the exit test stays true once the counter passes zero, so its inverse never lets go
SPIN = "LDI R1, #0\nL:\nIADD R1, R1, #1\nISETP.NE P0, R1, #0\n@!P0 BRA L\nEXIT"
LOOP4 = "LDI R1, #0\nL:\nIADD R1, R1, #1\nISETP.LT P0, R1, #4\n@P0 BRA L\nEXIT"


def test_wv_on_loop_exit_predicate_hangs():
    golden = Machine(CFG, assemble(SPIN), 1, 32).run()
    d = desc(ErrorModel.WV, bit_err_mask=1, thread_set=ALL_LANES)
    _, out, _ = run_kernel(SPIN, d, golden=golden.dyn_instr_count)
    assert out.trap.kind is TrapKind.WATCHDOG_HANG


def test_wv_on_loop_continue_predicate_leaves_early():
    d = desc(ErrorModel.WV, bit_err_mask=1, thread_set=ALL_LANES)
    m, out, inj = run_kernel(LOOP4, d)
    assert out.completed and (m.regs[0, 1] == 1).all() and inj.activations == 1


def _store_kernel(name, src):
    return Workload(name, src, 1, 32, (), Buffer("out", 32), lambda rng: {},
                    lambda d: np.arange(32, dtype=np.uint32))


NO_LDC = _store_kernel("no_ldc", f"""
    S2R R0, SR_TID_X
    SHL R1, R0, #2
    LDI R2, #{BUFFER_BASE}
    IADD R1, R1, R2
    STG [R1], R0
    EXIT
""")


def test_ims_without_shared_or_constant_loads_is_masked():
    g = run_golden(NO_LDC)
    rec = run_injection(g, desc(ErrorModel.IMS, bit_err_mask=0xFFFF, thread_set=ALL_LANES))
    assert rec.outcome is Outcome.MASKED and rec.activations == 0


def test_iio_all_ones_on_address_immediate_traps():
    wl = _store_kernel("ldi_addr", f"LDI R1, #{BUFFER_BASE}\nSTG [R1], R1\nEXIT")
    g = run_golden(_store_kernel("ldi_ok", f"""
        S2R R0, SR_TID_X
        SHL R1, R0, #2
        LDI R2, #{BUFFER_BASE}
        IADD R1, R1, R2
        STG [R1], R0
        EXIT"""))
    m = Machine(CFG, wl.program, 1, 32)
    inj = Injector(desc(ErrorModel.IIO, bit_err_mask=0xFFFFFFFF, thread_set=ALL_LANES), CFG)
    inj.attach(m)
    assert m.run(10).trap.kind is TrapKind.BAD_GLOBAL_ADDR
    assert g.dyn_instr_count == 6


def test_imd_address_mode_vs_data_mode():
    src = "S2R R0, SR_TID_X\nSHL R1, R0, #2\nSTS [R1], R0\nLDS R2, [R1]\nEXIT"
    data = desc(ErrorModel.IMD, bit_err_mask=0x10, thread_set=ALL_LANES, seed=2)
    addr = desc(ErrorModel.IMD, bit_err_mask=0x40000, thread_set=ALL_LANES, seed=3)
    m, out, _ = run_kernel(src, data, shared=128)
    assert out.completed and (m.regs[0, 2] == (np.arange(32) ^ 0x10)).all()
    _, out, _ = run_kernel(src, addr, shared=128)
    assert out.trap.kind is TrapKind.BAD_SHARED_ADDR


# ---- operation codes -----------------------------------------------------

def test_ioc_iadd_to_imul():
    d = desc(ErrorModel.IOC, target_opcode_class=OpClass.INT, target_op=Opcode.IADD,
             replacement_op=Opcode.IMUL)
    m, _, _ = run_kernel("IADD R1, R2, R3\nEXIT", d, regs={(0, 2): 3, (0, 3): 4})
    assert (m.regs[0, 1] == 12).all()


def test_ioc_identity_replacement():
    d = desc(ErrorModel.IOC, target_opcode_class=OpClass.INT, target_op=Opcode.IADD,
             replacement_op=Opcode.IADD)
    m, _, _ = run_kernel("IADD R1, R2, R3\nEXIT", d, regs={(0, 2): 3, (0, 3): 4})
    assert (m.regs[0, 1] == 7).all()


def test_ioc_on_gemm_changes_output():
    g = run_golden("gemm-lite")
    d = ErrorDescriptor(ErrorModel.IOC, warp_set=frozenset(range(8)),
                        target_opcode_class=OpClass.INT, target_op=Opcode.IADD,
                        replacement_op=Opcode.IMUL)
    assert run_injection(g, d).outcome in (Outcome.SDC, Outcome.DUE)


def test_ivoc_traps_on_first_match(vadd):
    rec = run_injection(vadd, desc(ErrorModel.IVOC, target_opcode_class=OpClass.INT))
    assert rec.outcome is Outcome.DUE and rec.due_detail == "ILLEGAL_INSTRUCTION"
    assert rec.activations == 1


def test_ivoc_on_idle_warp_is_masked():
    g = run_golden("loopy_iota")   # two warps, slots 0 and 1
    rec = run_injection(g, desc(ErrorModel.IVOC, warp_set=frozenset({7}),
                                target_opcode_class=OpClass.INT))
    assert rec.outcome is Outcome.MASKED and rec.activations == 0


def test_one_model_per_run():
    a = desc(ErrorModel.IVOC, target_opcode_class=OpClass.INT)
    b = desc(ErrorModel.IIO, bit_err_mask=1)
    with pytest.raises(InjectorError):
        build_injector([a, b], CFG)
    m = Machine(CFG, assemble("EXIT"), 1, 32)
    Injector(a, CFG).attach(m)
    with pytest.raises(InjectorError):
        Injector(b, CFG).attach(m)


# ---- descriptors ---------------------------------------------------------

def test_ipp_resolves_to_concrete_model():
    with pytest.raises(ValueError):
        ErrorDescriptor(ErrorModel.IPP, warp_set=W0)
    assert {resolve_ipp(s) for s in range(60)} == set(IPP_TARGETS)


def test_descriptor_validation():
    with pytest.raises(ValueError):
        ErrorDescriptor(ErrorModel.IIO, warp_set=frozenset())
    with pytest.raises(ValueError):
        desc(ErrorModel.IOC, target_opcode_class=OpClass.FP32, replacement_op=Opcode.IMUL)
    with pytest.raises(ValueError):
        desc(ErrorModel.IAL, lane_id=40, ial_mode=IalMode.DISABLE,
             target_opcode_class=OpClass.INT)


def test_descriptor_file_format(tmp_path):
    d = desc(ErrorModel.IOC, target_opcode_class=OpClass.INT, target_op=Opcode.IADD,
             replacement_op=Opcode.XOR, seed=99)
    text = d.to_text()
    assert "replacement_op=XOR\n" in text and "bit_err_mask=0x00000000\n" in text
    assert all("=" in line for line in text.splitlines())
    path = tmp_path / "d.txt"
    path.write_text(text)
    assert ErrorDescriptor.from_text(path.read_text()) == d
    with pytest.raises(ValueError):
        ErrorDescriptor.from_text(text + "bogus=1\n")


@pytest.fixture(scope="module")
def metas():
    out = {}
    for name in ("gemm_naive", "histogram", "loopy_iota", "vectoradd_int"):
        g = run_golden(name)
        out[name] = g
    return out


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(ALL_MODELS), st.integers(0, 2 ** 64 - 1),
       st.sampled_from(["gemm_naive", "histogram", "loopy_iota", "vectoradd_int"]))
def test_sampler_deterministic_and_serializable(metas, model, seed, wname):
    g = metas[wname]
    a = sample_descriptor(model, g.config, g.meta, seed)
    b = sample_descriptor(model, g.config, g.meta, seed)
    assert a == b
    assert ErrorDescriptor.from_text(a.to_text()) == a
    assert ErrorDescriptor.from_text(a.to_inline()) == a
    assert a.warp_set <= set(g.meta.warp_slots) and len(a.warp_set) == 1
    if model is ErrorModel.IPP:
        assert a.model in IPP_TARGETS and a.declared_model is ErrorModel.IPP
    if a.model not in (ErrorModel.IOC, ErrorModel.IVOC, ErrorModel.IAL):
        assert 1 <= bin(a.bit_err_mask).count("1") <= 2
    assert 1 <= len(a.thread_set) <= 4


def test_ira_draws_respect_register_limit(metas):
    g = metas["gemm_naive"]
    for seed in range(1000):
        d = sample_descriptor(ErrorModel.IRA, g.config, g.meta, seed)
        hits = [i for i in g.meta.instructions if static_match(d, i, g.config.regs_per_thread)]
        assert hits
        for i in hits:
            assert i._regs[d.err_oper_loc] ^ (d.bit_err_mask & 31) < g.config.regs_per_thread


def test_ivoc_draws_always_due(metas):
    g = metas["gemm_naive"]
    for seed in range(200):
        d = sample_descriptor(ErrorModel.IVOC, g.config, g.meta, seed)
        assert run_injection(g, d).outcome is Outcome.DUE


# ---- invariants ----------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ALL_MODELS), st.integers(0, 2 ** 32),
       st.sampled_from(["histogram", "loopy_iota", "vectoradd_int"]))
def test_permanence_counter_matches_trace_scan(metas, model, seed, wname):
    g = metas[wname]
    d = sample_descriptor(model, g.config, g.meta, seed)
    live, scanned = audit_permanence(g, d)
    assert live == scanned


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([m for m in ALL_MODELS if m is not ErrorModel.IVOC
                        and m is not ErrorModel.IAL]),
       st.integers(0, 2 ** 32), st.sampled_from(["histogram", "loopy_iota", "vectoradd_int"]))
def test_identity_parameters_are_no_ops(metas, model, seed, wname):
    g = metas[wname]
    d = with_identity(sample_descriptor(model, g.config, g.meta, seed))
    trace = []
    m = g.workload.make_machine(g.config, g.data, trace=trace)
    Injector(d, g.config).attach(m)
    out = m.run(g.dyn_instr_count)
    if d.model is ErrorModel.IVRA:
        return  # a zero mask never reaches an invalid register, so nothing matches
    assert out.completed and trace == g.trace
    assert np.array_equal(m.global_mem, _golden_memory(g))


def _golden_memory(g):
    m = g.workload.make_machine(g.config, g.data)
    m.run()
    return m.global_mem


@pytest.mark.parametrize("model", [ErrorModel.IIO, ErrorModel.IMS, ErrorModel.WV,
                                   ErrorModel.IAT, ErrorModel.IAC, ErrorModel.IAL])
def test_scope_containment(vadd, model):
    lanes = frozenset({2, 9})
    # a whole-word stride keeps every corrupted address legal, so the run completes
    kw = dict(warp_set=frozenset({1}), thread_set=lanes, bit_err_mask=0x4)
    if model is ErrorModel.IAL:
        kw = dict(warp_set=frozenset({1}), lane_id=9, ial_mode=IalMode.DISABLE,
                  target_opcode_class=OpClass.INT)
    d = ErrorDescriptor(model, **kw)
    golden = vadd.workload.make_machine(vadd.config, vadd.data)
    golden.run()
    m = vadd.workload.make_machine(vadd.config, vadd.data)
    Injector(d, vadd.config).attach(m)
    assert m.run(vadd.dyn_instr_count).completed
    outside = np.ones((m.num_slots, 32), bool)
    outside[1, sorted(d.scope_lanes)] = False
    assert np.array_equal(m.regs.transpose(0, 2, 1)[outside],
                          golden.regs.transpose(0, 2, 1)[outside])
    assert np.array_equal(m.preds.transpose(0, 2, 1)[outside],
                          golden.preds.transpose(0, 2, 1)[outside])
