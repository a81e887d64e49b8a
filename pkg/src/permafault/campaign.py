"""Golden runs, injection runs, EPR aggregation and gate-level campaigns.

Per-injection seeds come from a splitmix64 chain so any record can be
replayed on its own::

    h = mix(base_seed ^ fnv1a64(model))
    h = mix(h ^ fnv1a64(workload))
    seed = mix(h ^ index)

where ``mix`` is the splitmix64 finalizer and ``fnv1a64`` the 64-bit
FNV-1a hash of the UTF-8 name.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .gate import (
    ClassSummary, FaprRow, FaultClass, GateContext, GateFaultOutcome, build_unit,
    compute_fapr, enumerate_fault_sites, simulate_site,
)
from .injector import ErrorDescriptor, Injector, WorkloadMeta, count_matching, sample_descriptor
from .isa import decode
from .machine import SmConfig
from .taxonomy import ALL_MODELS, ErrorModel
from .units import FaultSite, Unit
from .workloads import Workload, get_workload

MASK64 = (1 << 64) - 1

EXIT_OK = 0
EXIT_ORACLE = 2
EXIT_CONFIG = 3


class OracleMismatch(RuntimeError):
    """The fault-free run disagrees with the workload's CPU oracle."""


class ConfigError(ValueError):
    """Campaign parameters are unusable."""


# --------------------------------------------------------------------------
# seeds

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode():
        h = ((h ^ b) * 0x100000001B3) & MASK64
    return h


def injection_seed(base_seed: int, model: str, workload: str, index: int) -> int:
    h = splitmix64((base_seed & MASK64) ^ fnv1a64(model))
    h = splitmix64(h ^ fnv1a64(workload))
    return splitmix64(h ^ (index & MASK64))


# --------------------------------------------------------------------------
# golden and injection runs

class Outcome(str, enum.Enum):
    MASKED = "MASKED"
    SDC = "SDC"
    DUE = "DUE"
    ERROR = "ERROR"   # internal failure of the harness, kept out of the EPR cells


@dataclass
class Golden:
    workload: Workload
    config: SmConfig
    data: dict
    output: np.ndarray
    dyn_instr_count: int
    trace: list[str]
    meta: WorkloadMeta


def run_golden(workload: Workload | str, base: SmConfig | None = None) -> Golden:
    """Fault-free run, checked against the CPU oracle."""
    wl = get_workload(workload) if isinstance(workload, str) else workload
    cfg = wl.config_for(base)
    data = wl.make_inputs()
    trace: list[str] = []
    m = wl.make_machine(cfg, data, trace=trace)
    out = m.run()
    if not out.completed:
        raise OracleMismatch(f"{wl.name}: golden run trapped: {out.trap}")
    got = wl.read_output(m)
    want = wl.reference_output(data)
    if got.shape != want.shape or not np.array_equal(got, want):
        bad = np.flatnonzero(got != want) if got.shape == want.shape else [-1]
        raise OracleMismatch(f"{wl.name}: output differs from oracle at {len(bad)} words "
                             f"(first index {bad[0]})")
    return Golden(wl, cfg, data, got, out.dyn_instr_count, trace,
                  WorkloadMeta.from_golden(wl, cfg, trace))


@dataclass(frozen=True)
class InjectionRecord:
    id: int
    model: str
    workload: str
    outcome: Outcome
    due_detail: str
    sdc_count: int
    first_bad_index: int
    dyn_count: int
    activations: int
    seed: int
    descriptor: str
    wall_time: float = field(default=0.0, compare=False)

    CSV_FIELDS = ("id", "model", "workload", "outcome", "due_detail", "sdc_count",
                  "first_bad_index", "dyn_count", "activations", "seed")

    def csv_row(self) -> list:
        return [self.id, self.model, self.workload, self.outcome.value, self.due_detail,
                self.sdc_count, self.first_bad_index, self.dyn_count, self.activations,
                f"0x{self.seed:016x}"]

    def to_json(self) -> dict:
        d = dict(zip(self.CSV_FIELDS, self.csv_row()))
        d["descriptor"] = self.descriptor
        return d


def run_injection(golden: Golden, desc: ErrorDescriptor, injection_id: int = 0,
                  model: str | None = None, trace: list | None = None) -> InjectionRecord:
    """Run one faulty execution and classify it as MASKED, SDC or DUE."""
    wl = golden.workload
    t0 = time.perf_counter()
    inj = Injector(desc, golden.config)
    m = wl.make_machine(golden.config, golden.data, trace=trace)
    inj.attach(m)
    out = m.run(golden.dyn_instr_count)
    if out.trap is None and inj.scratch:
        raise AssertionError("scratch store not empty at run end")
    due, count, first = "", 0, -1
    if out.trap is not None:
        outcome = Outcome.DUE
        due = out.trap.kind.value
    else:
        diff = np.flatnonzero(wl.read_output(m) != golden.output)
        if diff.size:
            outcome, count, first = Outcome.SDC, int(diff.size), int(diff[0])
        else:
            outcome = Outcome.MASKED
    name = model or (desc.declared_model or desc.model).value
    return InjectionRecord(injection_id, name, wl.name, outcome, due, count, first,
                           out.dyn_instr_count, inj.activations, desc.seed, desc.to_inline(),
                           time.perf_counter() - t0)


def trace_records(golden: Golden, trace: Sequence[str]) -> list[tuple]:
    """(warp, instruction, issued mask) for each line of a machine trace."""
    words = golden.workload.program.words
    out = []
    for line in trace:
        f = dict(kv.split("=", 1) for kv in line.split())
        pc = int(f["pc"])
        if f["op"] == "ILLEGAL" or pc >= len(words):
            continue
        out.append((int(f["warp"]), decode(words[pc]), int(f["mask"], 16)))
    return out


def audit_permanence(golden: Golden, desc: ErrorDescriptor) -> tuple[int, int]:
    """(hook activations, matching dynamic instructions found by scanning the run's trace)."""
    trace: list[str] = []
    rec = run_injection(golden, desc, trace=trace)
    return rec.activations, count_matching(desc, trace_records(golden, trace), golden.config)


# --------------------------------------------------------------------------
# aggregation

@dataclass(frozen=True)
class Epr:
    n: int
    masked: int
    sdc: int
    due: int

    @property
    def sdc_rate(self) -> float:
        return self.sdc / self.n

    @property
    def due_rate(self) -> float:
        return self.due / self.n

    @property
    def total(self) -> float:
        return (self.sdc + self.due) / self.n


def compute_epr(records: Sequence[InjectionRecord]) -> Epr:
    cell = [r for r in records if r.outcome is not Outcome.ERROR]
    if not cell:
        raise ValueError("EPR of an empty cell")
    k = {o: sum(1 for r in cell if r.outcome is o) for o in Outcome}
    return Epr(len(cell), k[Outcome.MASKED], k[Outcome.SDC], k[Outcome.DUE])


def group_epr(report: "CampaignReport", models: Sequence[ErrorModel]) -> Epr:
    names = {m.value for m in models}
    return compute_epr([r for r in report.records if r.model in names])


@dataclass(frozen=True)
class CampaignConfig:
    models: tuple[ErrorModel, ...] = ALL_MODELS
    workloads: tuple[str, ...] = ()
    injections_per_cell: int = 100
    base_seed: int = 0
    jobs: int = 1
    base: SmConfig = SmConfig()

    def __post_init__(self) -> None:
        names = []
        for w in self.workloads:
            try:
                names.append(get_workload(w).name)
            except KeyError:
                names.append(w)  # reported by validate()
        object.__setattr__(self, "workloads", tuple(names))
        object.__setattr__(self, "models", tuple(ErrorModel(m) for m in self.models))

    def validate(self) -> None:
        if not self.models or not self.workloads:
            raise ConfigError("campaign needs at least one model and one workload")
        if self.injections_per_cell < 1:
            raise ConfigError("injections_per_cell must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        for w in self.workloads:
            try:
                get_workload(w)
            except KeyError as exc:
                raise ConfigError(str(exc)) from None


@dataclass
class CampaignReport:
    config: CampaignConfig
    records: list[InjectionRecord]

    def cells(self) -> list[tuple[str, str, Epr]]:
        by: dict[tuple[str, str], list] = {}
        for r in self.records:
            by.setdefault((r.model, r.workload), []).append(r)
        return [(m.value, w, compute_epr(by[(m.value, w)]))
                for m in self.config.models for w in self.config.workloads]

    def model_averages(self) -> dict[str, dict[str, float]]:
        out = {}
        for m in self.config.models:
            cs = [e for name, _, e in self.cells() if name == m.value]
            out[m.value] = {k: sum(getattr(e, a) for e in cs) / len(cs)
                            for k, a in (("epr_sdc", "sdc_rate"), ("epr_due", "due_rate"),
                                         ("epr_total", "total"))}
        return out

    @property
    def errors(self) -> list[InjectionRecord]:
        return [r for r in self.records if r.outcome is Outcome.ERROR]

    # -- serialization ----------------------------------------------------

    EPR_FIELDS = ("model", "workload", "n", "masked", "sdc", "due",
                  "epr_sdc", "epr_due", "epr_total")

    def epr_rows(self) -> list[list]:
        return [[m, w, e.n, e.masked, e.sdc, e.due, f"{e.sdc_rate:.6f}", f"{e.due_rate:.6f}",
                 f"{e.total:.6f}"] for m, w, e in self.cells()]

    def epr_csv(self) -> str:
        return _csv(self.EPR_FIELDS, self.epr_rows())

    def records_csv(self) -> str:
        return _csv(InjectionRecord.CSV_FIELDS, [r.csv_row() for r in self.records])

    def to_json(self) -> str:
        cfg = self.config
        doc = {
            "tool": "permafault",
            "version": __version__,
            "config": {
                "models": [m.value for m in cfg.models],
                "workloads": list(cfg.workloads),
                "injections_per_cell": cfg.injections_per_cell,
                "base_seed": cfg.base_seed,
                "seed_hash": "splitmix64 chain over fnv1a64(model), fnv1a64(workload), index",
                "sm": asdict(cfg.base),
            },
            "cells": [dict(zip(self.EPR_FIELDS, row)) for row in self.epr_rows()],
            "model_averages": {k: {a: f"{v:.6f}" for a, v in d.items()}
                               for k, d in self.model_averages().items()},
            "records": [r.to_json() for r in self.records],
        }
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"epr.csv": self.epr_csv(), "records.csv": self.records_csv(),
                 "report.json": self.to_json()}
        paths = {}
        for name, text in files.items():
            p = out / name
            p.write_text(text)
            paths[name] = p
        return paths


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# software campaign

_POOL_GOLDENS: dict[str, Golden] = {}


def descriptor_for(golden: Golden, model: ErrorModel, seed: int) -> ErrorDescriptor:
    return sample_descriptor(model, golden.config, golden.meta, seed)


def _run_task(task: tuple[int, str, str, int]) -> InjectionRecord:
    iid, model, wname, seed = task
    golden = _POOL_GOLDENS[wname]
    try:
        desc = descriptor_for(golden, ErrorModel(model), seed)
        return run_injection(golden, desc, iid, model)
    except Exception as exc:  # recorded, never dropped
        return InjectionRecord(iid, model, wname, Outcome.ERROR, f"{type(exc).__name__}: {exc}",
                               0, -1, 0, 0, seed, "")


def campaign_tasks(cfg: CampaignConfig) -> list[tuple[int, str, str, int]]:
    tasks = []
    for m in cfg.models:
        for w in cfg.workloads:
            for i in range(cfg.injections_per_cell):
                tasks.append((len(tasks), m.value, w,
                              injection_seed(cfg.base_seed, m.value, w, i)))
    return tasks


def run_campaign(cfg: CampaignConfig) -> CampaignReport:
    """Every (model, workload, index) injection; results ordered by injection id."""
    cfg.validate()
    goldens = {w: run_golden(w, cfg.base) for w in cfg.workloads}  # aborts on oracle failure
    _POOL_GOLDENS.clear()
    _POOL_GOLDENS.update(goldens)
    tasks = campaign_tasks(cfg)
    if cfg.jobs == 1:
        records = [_run_task(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        chunk = max(1, min(64, len(tasks) // (cfg.jobs * 4) or 1))
        with ProcessPoolExecutor(cfg.jobs, mp_context=ctx) as ex:
            records = list(ex.map(_run_task, tasks, chunksize=chunk))
    records.sort(key=lambda r: r.id)
    return CampaignReport(cfg, records)


def replay_record(row: dict, base: SmConfig | None = None,
                  descriptor_text: str | None = None) -> InjectionRecord:
    """Re-run one injection from its records.csv row (descriptor is re-derived from its seed)."""
    golden = run_golden(row["workload"], base)
    seed = int(row["seed"], 0)
    desc = descriptor_for(golden, ErrorModel(row["model"]), seed)
    if descriptor_text and ErrorDescriptor.from_text(descriptor_text) != desc:
        raise AssertionError("stored descriptor does not match the one derived from the seed")
    return run_injection(golden, desc, int(row["id"]), row["model"])


# --------------------------------------------------------------------------
# gate-level campaign

@dataclass
class GateReport:
    units: tuple[Unit, ...]
    workloads: tuple[str, ...]
    outcomes: dict[Unit, list[GateFaultOutcome]]
    fapr: dict[Unit, list[FaprRow]]
    summary: dict[Unit, ClassSummary]

    def fapr_csv(self) -> str:
        rows = [[r.unit, r.category, r.sites_total, r.sites_in_category, f"{r.fapr:.6f}"]
                for u in self.units for r in self.fapr[u]]
        return _csv(("unit", "category", "sites_total", "sites_in_category", "fapr"), rows)

    def taxonomy_csv(self) -> str:
        classes = list(FaultClass)
        header = ["unit", "sites_total"] + [c.value.lower() for c in classes] + \
                 [f"pct_{c.value.lower()}" for c in classes]
        rows = []
        for u in self.units:
            s = self.summary[u]
            rows.append([u.value, s.sites_total] + [s.counts[c.value] for c in classes]
                        + [f"{s.pct(c):.2f}" for c in classes])
        return _csv(header, rows)

    def sites_csv(self) -> str:
        rows = []
        for u in self.units:
            for o in self.outcomes[u]:
                s = o.site
                ev = "" if o.evidence is None else ":".join(str(x) for x in o.evidence)
                rows.append([u.value, s.signal, s.bit, s.stuck, o.cls.value,
                             "|".join(sorted(o.categories)),
                             "|".join(sorted(o.triggering_opcodes)), ev])
        return _csv(("unit", "signal", "bit", "stuck", "class", "categories", "opcodes",
                     "evidence"), rows)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, text in (("fapr.csv", self.fapr_csv()), ("taxonomy.csv", self.taxonomy_csv()),
                           ("sites.csv", self.sites_csv())):
            (out / name).write_text(text)
            paths[name] = out / name
        return paths


_POOL_CONTEXTS: list[GateContext] = []


def _gate_task(site: FaultSite) -> GateFaultOutcome:
    out = simulate_site(site, _POOL_CONTEXTS)
    # per-workload detail stays in the worker; the merged fields carry the result
    return GateFaultOutcome(out.site, out.cls, out.categories, out.triggering_opcodes,
                            out.evidence)


def run_gate_campaign(units: Sequence[Unit], workloads: Sequence[str | Workload],
                      base: SmConfig | None = None, jobs: int = 1) -> GateReport:
    """Profile, enumerate and simulate every site of each unit against every workload."""
    if not units or not workloads:
        raise ConfigError("gate campaign needs at least one unit and one workload")
    wls = [get_workload(w) if isinstance(w, str) else w for w in workloads]
    contexts = [GateContext.build(w, base) for w in wls]
    _POOL_CONTEXTS[:] = contexts
    # site lists come from the widest configuration (regs_per_thread does not change widths)
    ref_cfg = contexts[0].config
    outcomes, fapr, summary = {}, {}, {}
    for u in units:
        model = build_unit(u, ref_cfg, wls[0].program if u is Unit.FETCH else None)
        sites = enumerate_fault_sites(model)
        if jobs == 1:
            res = [_gate_task(s) for s in sites]
        else:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(jobs, mp_context=ctx) as ex:
                res = list(ex.map(_gate_task, sites, chunksize=max(1, len(sites) // (jobs * 4))))
        outcomes[u] = res
        fapr[u], summary[u] = compute_fapr(u, res, sites)
    return GateReport(tuple(units), tuple(w.name for w in wls), outcomes, fapr, summary)
