"""Acceptance suite: one check per primary criterion, each printing a PASS/FAIL line.

The software campaigns here are full size (13 models, every workload, 100 injections
per cell) so this file takes several minutes.
"""

from __future__ import annotations

import csv
import random
import time

import numpy as np
import pytest

from permafault.campaign import (
    CampaignConfig, Outcome, audit_permanence, group_epr, replay_record, run_campaign,
    run_gate_campaign, run_golden, run_injection,
)
from permafault.gate import FaultClass, profile
from permafault.injector import ErrorDescriptor, Injector, MASK_MODELS, sample_descriptor, with_identity
from permafault.isa import SpecialReg
from permafault.taxonomy import ALL_MODELS, ErrorModel
from permafault.units import Unit
from permafault.workloads import SENTINEL, SUITE

SEED = 2024
N_PER_CELL = 100
JOBS = 8
BUDGET_S = 600.0


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def full_config(jobs: int) -> CampaignConfig:
    return CampaignConfig(ALL_MODELS, tuple(w.name for w in SUITE), N_PER_CELL, SEED, jobs)


@pytest.fixture(scope="module")
def parallel_campaign(tmp_path_factory):
    out = tmp_path_factory.mktemp("jobs8")
    t0 = time.perf_counter()
    rep = run_campaign(full_config(JOBS))
    elapsed = time.perf_counter() - t0
    rep.write(out)
    return rep, out, elapsed


@pytest.fixture(scope="module")
def serial_campaign(tmp_path_factory):
    out = tmp_path_factory.mktemp("jobs1")
    rep = run_campaign(full_config(1))
    rep.write(out)
    return rep, out


def test_criterion_01_null_fault_fidelity(capsys):
    t0 = time.perf_counter()
    bad = []
    for wl in SUITE:
        g = run_golden(wl)
        prof = profile(wl)
        same = (prof.completed and prof.step_log == g.trace
                and np.array_equal(prof.output, g.output)
                and all(len(t) == g.dyn_instr_count for t in prof.traces.values()))
        if not same:
            bad.append(wl.name)
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 30.0
    report(capsys, 1, ok, f"{len(SUITE)} workloads, mismatches={bad}, {elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_02_taxonomy_partition(capsys):
    t0 = time.perf_counter()
    rep = run_gate_campaign(list(Unit), [w.name for w in SUITE])
    elapsed = time.perf_counter() - t0
    problems = []
    for u in Unit:
        s = rep.summary[u]
        if len(rep.outcomes[u]) != s.sites_total:
            problems.append(f"{u.value}: outcomes != sites")
        if any(not isinstance(o.cls, FaultClass) for o in rep.outcomes[u]):
            problems.append(f"{u.value}: unclassified site")
        if sum(s.counts[c.value] for c in FaultClass) != s.sites_total:
            problems.append(f"{u.value}: class counts != sites")
        keys = [(o.site.signal, o.site.bit, o.site.stuck) for o in rep.outcomes[u]]
        if len(set(keys)) != len(keys):
            problems.append(f"{u.value}: site classified twice")
    ok = not problems and elapsed < BUDGET_S
    sizes = ", ".join(f"{u.value}={rep.summary[u].sites_total}" for u in Unit)
    report(capsys, 2, ok, f"sites {sizes}, problems={problems}, {elapsed:.1f}s (< 600s)")
    assert ok


def test_criterion_03_ivoc_totality(capsys, parallel_campaign):
    rep = parallel_campaign[0]
    live = [r for r in rep.records if r.model == "IVOC" and r.activations >= 1]
    not_due = [r.id for r in live if r.outcome is not Outcome.DUE]
    ok = bool(live) and not not_due
    report(capsys, 3, ok, f"{len(live)} activated IVOC injections, non-DUE={len(not_due)}")
    assert ok


def test_criterion_04_imd_masking(capsys, parallel_campaign):
    rep = parallel_campaign[0]
    plain = {w.name for w in SUITE if not w.uses_shared}
    cell = [r for r in rep.records if r.model == "IMD" and r.workload in plain]
    not_masked = [r.id for r in cell if r.outcome is not Outcome.MASKED]
    ok = bool(cell) and not not_masked
    report(capsys, 4, ok, f"{len(cell)} IMD injections on {len(plain)} workloads without "
                          f"shared memory, non-MASKED={len(not_masked)}")
    assert ok


def test_criterion_05_identity_masks(capsys):
    models = sorted(MASK_MODELS | {ErrorModel.IOC, ErrorModel.IPP}, key=lambda m: m.value)
    runs, bad = 0, []
    for wl in SUITE:
        g = run_golden(wl)
        for m in models:
            for i in range(10):
                d = with_identity(sample_descriptor(m, g.config, g.meta, SEED * 1000 + i))
                r = run_injection(g, d)
                runs += 1
                if r.outcome is not Outcome.MASKED:
                    bad.append((m.value, wl.name, i, r.outcome.value))
    ok = not bad
    report(capsys, 5, ok, f"{runs} identity injections over {len(models)} models, "
                          f"non-MASKED={bad[:5]}")
    assert ok


def _vectoradd_with_corrupted_tids(g, desc: ErrorDescriptor) -> np.ndarray:
    """Brute force: every thread recomputes its element from a possibly corrupted tid."""
    wl = g.workload
    a, b = g.data["a"], g.data["b"]
    n = a.size
    out = np.full(wl.output.words, SENTINEL, np.uint32)
    warps_per_cta = wl.block // 32
    for cta in range(wl.grid):
        for tid in range(wl.block):
            slot = cta * warps_per_cta + tid // 32
            t = tid
            if slot in desc.warp_set and tid % 32 in desc.scope_lanes:
                t = tid ^ desc.bit_err_mask
            gid = cta * wl.block + t
            if gid < n:
                out[gid] = a[gid] + b[gid]
    return out


def test_criterion_06_iat_oracle_diff(capsys):
    g = run_golden("vectoradd_int")
    rng = random.Random(SEED)
    cases, bad = 0, []
    for slot in g.meta.warp_slots:
        for lane in range(32):
            mask = 1 << rng.randrange(5)
            d = ErrorDescriptor(ErrorModel.IAT, warp_set=frozenset({slot}),
                                thread_set=frozenset({lane}), bit_err_mask=mask,
                                sr_dim=SpecialReg.SR_TID_X)
            m = g.workload.make_machine(g.config, g.data)
            Injector(d, g.config).attach(m)
            assert m.run(g.dyn_instr_count).completed
            got = g.workload.read_output(m)
            want = _vectoradd_with_corrupted_tids(g, d)
            owner = (slot // (g.workload.block // 32)) * g.workload.block \
                + (slot % (g.workload.block // 32)) * 32 + lane
            diff = np.flatnonzero(got != g.output).tolist()
            rec = run_injection(g, d)
            cases += 1
            if not np.array_equal(got, want) or diff != [owner] or rec.outcome is not Outcome.SDC:
                bad.append((slot, lane, mask, diff))
    ok = not bad
    report(capsys, 6, ok, f"{cases} single-thread IAT injections on vectoradd, "
                          f"oracle mismatches={bad[:3]}")
    assert ok


OPERATION_GROUP = (ErrorModel.IOC, ErrorModel.IRA, ErrorModel.IVRA, ErrorModel.IIO)
PARALLEL_GROUP = (ErrorModel.IAT, ErrorModel.IAW, ErrorModel.WV)


def test_criterion_07_operation_errors_mostly_due(capsys, parallel_campaign):
    e = group_epr(parallel_campaign[0], OPERATION_GROUP)
    ok = e.due_rate > 0.5
    report(capsys, 7, ok, f"IOC/IRA/IVRA/IIO n={e.n} EPR_DUE={e.due_rate:.3f} "
                          f"EPR_SDC={e.sdc_rate:.3f} (need DUE > 0.5)")
    assert ok


def test_criterion_08_parallel_management_sdc(capsys, parallel_campaign):
    e = group_epr(parallel_campaign[0], PARALLEL_GROUP)
    ok = e.sdc_rate > 0.15
    report(capsys, 8, ok, f"IAT/IAW/WV n={e.n} EPR_SDC={e.sdc_rate:.3f} (need > 0.15)")
    assert ok


def test_criterion_09_determinism_and_replay(capsys, parallel_campaign, serial_campaign):
    par_dir, ser_dir = parallel_campaign[1], serial_campaign[1]
    names = ("epr.csv", "records.csv", "report.json")
    differ = [n for n in names if (par_dir / n).read_bytes() != (ser_dir / n).read_bytes()]
    rows = list(csv.DictReader((par_dir / "records.csv").open(newline="")))
    sample = random.Random(SEED).sample(rows, 100)
    records = parallel_campaign[0].records
    replay_bad = []
    for row in sample:
        again = replay_record(row, descriptor_text=records[int(row["id"])].descriptor)
        if again != records[int(row["id"])]:
            replay_bad.append(row["id"])
    ok = not differ and not replay_bad
    report(capsys, 9, ok, f"jobs=1 vs jobs={JOBS}: differing files={differ}; "
                          f"{len(sample)} replays, mismatches={replay_bad}")
    assert ok


def test_criterion_10_permanence_audit(capsys, parallel_campaign):
    rep = parallel_campaign[0]
    goldens = {w.name: run_golden(w) for w in SUITE}
    sample = random.Random(SEED + 1).sample(rep.records, 100)
    bad, active = [], 0
    for r in sample:
        d = ErrorDescriptor.from_text(r.descriptor)
        live, scanned = audit_permanence(goldens[r.workload], d)
        active += live > 0
        if live != scanned or live != r.activations:
            bad.append((r.id, live, scanned, r.activations))
    ok = not bad
    report(capsys, 10, ok, f"100 sampled injections ({active} activated), "
                           f"hook/scan mismatches={bad[:3]}")
    assert ok


def test_criterion_11_desk_scale_budget(capsys, parallel_campaign):
    rep, _, elapsed = parallel_campaign
    n_models, n_wl = len(rep.config.models), len(rep.config.workloads)
    ok = (n_models == 13 and n_wl >= 8 and len(rep.records) == 13 * n_wl * N_PER_CELL
          and not rep.errors and elapsed < BUDGET_S)
    report(capsys, 11, ok, f"{n_models} models x {n_wl} workloads x {N_PER_CELL} = "
                           f"{len(rep.records)} injections at jobs={JOBS} in {elapsed:.1f}s "
                           f"(< 600s), harness errors={len(rep.errors)}")
    assert ok
