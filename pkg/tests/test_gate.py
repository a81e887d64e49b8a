from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from permafault.gate import (
    OPEN_UNMAPPED, FaultClass, GateContext, GateFaultOutcome, build_unit, classify_output_diff,
    compute_fapr, enumerate_fault_sites, merge_results, profile, read_trace_header, simulate_fault,
    simulate_site, trace_bytes, write_trace, WorkloadFaultResult, _activated_cycles,
)
from permafault.isa import FIELDS, Opcode, encode, make_alu
from permafault.machine import SmConfig
from permafault.units import (
    DecoderModel, FaultSite, Unit, UnitModel, WscOutputs, decode_reference,
)
from permafault.workloads import SENTINEL, Buffer, Workload, get_workload

CFG = SmConfig()


def tiny(name: str, source: str, block: int = 32) -> Workload:
    """A kernel whose output buffer is never written (oracle: the poison pattern)."""
    return Workload(name, source, 1, block, (), Buffer("out", 1), lambda rng: {},
                    lambda d: np.array([SENTINEL], np.uint32))


EXIT_ONLY = tiny("exit_only", "EXIT")
ONE_WARP = tiny("one_warp", "S2R R0, SR_TID_X\nIADD R1, R0, #3\nSHL R2, R1, #1\nEXIT")


@pytest.fixture(scope="module")
def vadd_ctx():
    return GateContext.build(get_workload("vectoradd_int"))


# ---- site enumeration ----------------------------------------------------

def test_decoder_site_count():
    field_bits = sum(w for _, _, w in FIELDS)          # 32 output field bits
    expected = 2 * (32 + field_bits + 2 + 1)           # in_word, fields, mem_space, op_valid
    assert expected == 134
    assert len(enumerate_fault_sites(DecoderModel())) == expected


def test_fetch_site_count():
    assert len(enumerate_fault_sites(build_unit(Unit.FETCH, CFG))) == 2 * (8 * 16 + 32 + 4 + 1)


def test_wsc_site_count():
    # status 2b x 8, rr_ptr 4, sel_valid 1, warp_sel 4, masks 32+32, cta_id 8b x 8, smem 14b x 8
    expected = 2 * (8 * 2 + 4 + 1 + 4 + 32 + 32 + 8 * 8 + 8 * 14)
    assert len(enumerate_fault_sites(build_unit(Unit.WSC, CFG))) == expected == 530


def test_empty_unit_has_no_sites():
    class Stub(UnitModel):
        unit = Unit.DECODER
        widths: dict = {}
    assert enumerate_fault_sites(Stub()) == []


def test_site_order_and_uniqueness():
    sites = enumerate_fault_sites(build_unit(Unit.WSC, CFG))
    assert len(set(sites)) == len(sites)
    keys = [(s.signal, s.bit, s.stuck) for s in sites]
    assert keys == sorted(keys)


# ---- profiling -----------------------------------------------------------

def test_exit_kernel_one_pattern_per_unit():
    prof = profile(EXIT_ONLY)
    assert prof.completed
    assert all(len(t) == 1 for t in prof.traces.values())


def test_profile_pattern_count_and_null_fault_equivalence(vadd_ctx, goldens):
    prof = vadd_ctx.profile
    g = goldens["vectoradd_int"]
    assert all(len(t) == g.dyn_instr_count for t in prof.traces.values())
    assert prof.step_log == g.trace
    assert np.array_equal(prof.output, g.output)


def test_trace_bytes_reproducible(tmp_path):
    wl = get_workload("loopy_iota")
    a, b = profile(wl), profile(wl)
    cfg = wl.config_for()
    for u in Unit:
        assert trace_bytes(a.traces[u], cfg) == trace_bytes(b.traces[u], cfg)
    write_trace(tmp_path / "d.trace", a.traces[Unit.DECODER], cfg)
    hdr = read_trace_header(tmp_path / "d.trace")
    assert hdr["unit"] is Unit.DECODER and hdr["patterns"] == a.dyn_instr_count
    assert hdr["input_bits"] == 32 and hdr["output_bits"] == 35


# ---- classification ------------------------------------------------------

def test_decoder_opcode_valid_to_valid_is_ioc():
    good = decode_reference(encode(make_alu(Opcode.IADD, 1, 2, 3)))
    assert good.opcode == 1
    assert classify_output_diff(Unit.DECODER, good, good._replace(opcode=2), 32) == {"IOC"}


def test_decoder_opcode_to_unassigned_is_ivoc():
    good = decode_reference(encode(make_alu(Opcode.IADD, 1, 2, 3)))
    bad = good._replace(opcode=33, op_valid=0)
    assert classify_output_diff(Unit.DECODER, good, bad, 32) == {"IVOC"}


def test_wsc_thread_mask_is_iat():
    good = WscOutputs(1, 0, 0xFFFFFFFF, 0xFFFFFFFF, 0, 0)
    bad = good._replace(thread_mask=0xFFFFFFFE)
    assert classify_output_diff(Unit.WSC, good, bad, 16) == {"IAT"}


def test_decoder_dst_beyond_limit_is_ivra():
    good = decode_reference(encode(make_alu(Opcode.IADD, 3, 2, 1)))
    assert classify_output_diff(Unit.DECODER, good, good._replace(dst=19), 16) == {"IVRA"}
    assert classify_output_diff(Unit.DECODER, good, good._replace(dst=7), 16) == {"IRA"}


def test_immediate_field_is_iio():
    good = decode_reference(encode(make_alu(Opcode.IADD, 3, 2, imm=4)))
    assert classify_output_diff(Unit.DECODER, good, good._replace(src2=good.src2 ^ 1), 16) == {"IIO"}


def test_identical_outputs_rejected():
    good = WscOutputs(1, 0, 1, 1, 0, 0)
    with pytest.raises(ValueError):
        classify_output_diff(Unit.WSC, good, good, 16)


# ---- fault simulation ----------------------------------------------------

def test_rr_ptr_single_warp():
    ctx = GateContext.build(ONE_WARP)
    sa0 = simulate_fault(FaultSite(Unit.WSC, "rr_ptr", 0, 0), ctx)
    sa1 = simulate_fault(FaultSite(Unit.WSC, "rr_ptr", 0, 1), ctx)
    assert sa0.cls is FaultClass.UNCONTROLLABLE
    assert sa1.cls is not FaultClass.UNCONTROLLABLE


def test_decoder_dst_bit0_on_vectoradd(vadd_ctx):
    res = simulate_fault(FaultSite(Unit.DECODER, "out_dst", 0, 0), vadd_ctx)
    assert res.cls is FaultClass.SW_ERROR
    assert res.categories & {"IRA", "IVRA"}


def test_fetch_valid_sa1_uncontrollable_when_always_valid(vadd_ctx):
    lat = vadd_ctx.profile.traces[Unit.FETCH].latches["valid"]
    assert (lat == 1).all()
    assert simulate_fault(FaultSite(Unit.FETCH, "valid", 0, 1), vadd_ctx).cls \
        is FaultClass.UNCONTROLLABLE


def test_stuck_at_symmetry(vadd_ctx):
    for u in Unit:
        trace = vadd_ctx.profile.traces[u]
        for site in enumerate_fault_sites(vadd_ctx.models[u]):
            if site.stuck:
                continue
            vals = (trace.latches[site.signal] >> np.uint64(site.bit)) & np.uint64(1)
            if len(set(vals.tolist())) == 2:
                other = FaultSite(u, site.signal, site.bit, 1)
                assert len(_activated_cycles(trace, site)) and len(_activated_cycles(trace, other))


def test_monotone_activation_over_stimulus_subsets():
    ctxs = [GateContext.build(EXIT_ONLY), GateContext.build(get_workload("loopy_iota"))]
    for u in Unit:
        for site in enumerate_fault_sites(ctxs[1].models[u]):
            if simulate_site(site, ctxs).cls is FaultClass.UNCONTROLLABLE:
                assert simulate_site(site, ctxs[:1]).cls is FaultClass.UNCONTROLLABLE


def test_exit_only_is_mostly_uncontrollable():
    small = [GateContext.build(EXIT_ONLY)]
    more = small + [GateContext.build(get_workload("vectoradd_int"))]
    sites = enumerate_fault_sites(DecoderModel())
    frac = lambda ctxs: np.mean([simulate_site(s, ctxs).cls is FaultClass.UNCONTROLLABLE
                                 for s in sites])
    assert frac(small) > frac(more)


def test_decoder_campaign_over_two_workloads():
    ctxs = [GateContext.build(get_workload(n)) for n in ("vectoradd_int", "gemm_tiled")]
    sites = enumerate_fault_sites(DecoderModel())
    outs = [simulate_site(s, ctxs) for s in sites]
    rows, summary = compute_fapr(Unit.DECODER, outs, sites)
    cats = {r.category for r in rows if r.sites_in_category}
    assert {"IOC", "IVOC"} <= cats and len(cats) >= 5
    assert not any(OPEN_UNMAPPED in o.categories for o in outs)
    assert sum(summary.counts.values()) == len(sites)
    assert sum(summary.pct(c) for c in FaultClass) == pytest.approx(100.0)


# ---- merge and FAPR arithmetic ------------------------------------------

def _outcome(i, cls, cats=()):
    return GateFaultOutcome(FaultSite(Unit.DECODER, "in_word", i, 0), cls, frozenset(cats),
                            frozenset(), None)


def test_fapr_arithmetic():
    outs = [_outcome(i, FaultClass.SW_ERROR, {"IOC"}) for i in range(3)] + \
           [_outcome(i, FaultClass.HW_MASKED) for i in range(3, 10)]
    rows, summary = compute_fapr(Unit.DECODER, outs)
    assert next(r for r in rows if r.category == "IOC").fapr == pytest.approx(0.30)
    assert summary.pct(FaultClass.SW_ERROR) == pytest.approx(30.0)


def test_all_uncontrollable_summary():
    outs = [_outcome(i, FaultClass.UNCONTROLLABLE) for i in range(4)]
    rows, summary = compute_fapr(Unit.DECODER, outs)
    assert all(r.fapr == 0 for r in rows)
    assert [summary.pct(c) for c in (FaultClass.UNCONTROLLABLE, FaultClass.HW_MASKED,
                                     FaultClass.HW_HANG, FaultClass.SW_ERROR)] == [100, 0, 0, 0]


def test_fapr_rejects_incomplete_coverage():
    outs = [_outcome(0, FaultClass.UNCONTROLLABLE)]
    sites = [o.site for o in outs] + [FaultSite(Unit.DECODER, "in_word", 1, 0)]
    with pytest.raises(ValueError):
        compute_fapr(Unit.DECODER, outs, sites)


_CLASSES = list(FaultClass)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(_CLASSES), st.frozensets(st.sampled_from(["IOC", "WV"]))),
                min_size=1, max_size=6))
def test_merge_precedence(results):
    rs = [WorkloadFaultResult(f"w{i}", c, cats if c is FaultClass.SW_ERROR else frozenset(),
                              evidence=(0, "x", 0) if c is FaultClass.SW_ERROR else None)
          for i, (c, cats) in enumerate(results)]
    site = FaultSite(Unit.DECODER, "in_word", 0, 0)
    merged = merge_results(site, rs)
    order = [FaultClass.SW_ERROR, FaultClass.HW_HANG, FaultClass.HW_MASKED,
             FaultClass.UNCONTROLLABLE]
    assert merged.cls is next(c for c in order if any(r.cls is c for r in rs))
    want = frozenset().union(*(r.categories for r in rs if r.cls is FaultClass.SW_ERROR))
    assert merged.categories == want
