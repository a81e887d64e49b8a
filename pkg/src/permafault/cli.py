"""Command-line front end: assemble, run, profile and drive both campaign levels."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .asm import AsmError, assemble, disassemble, write_program
from .campaign import (
    EXIT_CONFIG, EXIT_OK, EXIT_ORACLE, CampaignConfig, ConfigError, OracleMismatch,
    run_campaign, run_gate_campaign, run_golden, replay_record,
)
from .gate import FaultClass, profile, write_trace
from .taxonomy import ALL_MODELS, parse_model
from .units import Unit
from .workloads import SUITE, get_workload

EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors use the sysexits code
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("PERMAFAULT_SEED", "0")
    try:
        return int(raw, 0)
    except ValueError:
        return 0


def _names(text: str | None, known: Sequence[str]) -> list[str]:
    if not text or text == "all":
        return list(known)
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="permafault", description=__doc__)
    p.add_argument("--version", action="version", version=f"permafault {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    a = sub.add_parser("asm", help="assemble a kernel and check the disassembly round trip")
    a.add_argument("file")
    a.add_argument("-o", "--output", help="write the binary program here")

    r = sub.add_parser("run", help="golden run of a workload with its oracle check")
    r.add_argument("workload")
    r.add_argument("--trace", help="write the dynamic instruction trace here")

    pr = sub.add_parser("profile", help="record per-unit golden input/output traces")
    pr.add_argument("--workloads", default="all")
    pr.add_argument("--out", default="out")

    g = sub.add_parser("gate-campaign", help="stuck-at campaign over unit models (FAPR)")
    g.add_argument("--unit", choices=["wsc", "fetch", "decoder", "all"], default="all")
    g.add_argument("--workloads", default="all")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out", default="out")

    s = sub.add_parser("sw-campaign", help="instruction-level injection campaign (EPR)")
    s.add_argument("--models", default="all")
    s.add_argument("--workloads", default="all")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=lambda x: int(x, 0), default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default="out")

    rp = sub.add_parser("replay", help="re-run one injection from records.csv")
    rp.add_argument("records")
    rp.add_argument("--id", type=int, required=True)

    rep = sub.add_parser("report", help="validate and summarize the CSVs in a directory")
    rep.add_argument("dir")

    k = sub.add_parser("kernels", help="list the shipped kernels or print one")
    k.add_argument("name", nargs="?")
    return p


# --------------------------------------------------------------------------

def _cmd_asm(args) -> int:
    src = Path(args.file).read_text()
    prog = assemble(src, Path(args.file).stem)
    again = assemble(disassemble(prog), prog.name)
    if again.words != prog.words:
        print("round trip mismatch", file=sys.stderr)
        return 1
    if args.output:
        write_program(prog, args.output)
    print(f"{prog.name}: {len(prog.words)} words, round trip ok")
    return EXIT_OK


def _cmd_run(args) -> int:
    wl = get_workload(args.workload)
    g = run_golden(wl)
    if args.trace:
        Path(args.trace).write_text("\n".join(g.trace) + "\n")
    print(f"{wl.name}: COMPLETED dyn={g.dyn_instr_count} words={g.output.size} oracle=ok")
    return EXIT_OK


def _cmd_profile(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in _names(args.workloads, [w.name for w in SUITE]):
        wl = get_workload(name)
        cfg = wl.config_for()
        prof = profile(wl, cfg)
        if not prof.completed:
            raise OracleMismatch(f"{name}: unit-level golden run trapped")
        for unit, tr in prof.traces.items():
            write_trace(out / f"{name}.{unit.value.lower()}.trace", tr, cfg)
        print(f"{name}: dyn={prof.dyn_instr_count} cycles={len(prof.traces[Unit.WSC].opcodes)}")
    return EXIT_OK


def _cmd_gate(args) -> int:
    units = list(Unit) if args.unit == "all" else [Unit[args.unit.upper()]]
    wls = _names(args.workloads, [w.name for w in SUITE])
    rep = run_gate_campaign(units, wls, jobs=args.jobs)
    rep.write(args.out)
    for u in units:
        s = rep.summary[u]
        pcts = "  ".join(f"{c.value}={s.pct(c):.1f}%" for c in FaultClass)
        print(f"{u.value}: sites={s.sites_total}  {pcts}")
    return EXIT_OK


def _cmd_sw(args) -> int:
    try:
        models = tuple(parse_model(m) for m in _names(args.models, [m.value for m in ALL_MODELS]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    wls = tuple(_names(args.workloads, [w.name for w in SUITE]))
    seed = args.seed if args.seed is not None else _default_seed()
    cfg = CampaignConfig(models, wls, args.n, seed, args.jobs)
    rep = run_campaign(cfg)
    rep.write(args.out)
    for m, w, e in rep.cells():
        print(f"{m:5s} {w:14s} n={e.n} masked={e.masked} sdc={e.sdc} due={e.due} "
              f"epr={e.total:.3f}")
    if rep.errors:
        print(f"{len(rep.errors)} injections failed inside the harness", file=sys.stderr)
        return 1
    return EXIT_OK


def _outcome_line(rec) -> str:
    return (f"id={rec.id} model={rec.model} workload={rec.workload} outcome={rec.outcome.value} "
            f"due_detail={rec.due_detail} sdc_count={rec.sdc_count} dyn={rec.dyn_count} "
            f"activations={rec.activations}")


def _cmd_replay(args) -> int:
    path = Path(args.records)
    with path.open(newline="") as fh:
        rows = {int(r["id"]): r for r in csv.DictReader(fh)}
    if args.id not in rows:
        raise ConfigError(f"no record with id {args.id} in {path}")
    row = rows[args.id]
    stored = None
    report = path.with_name("report.json")
    if report.exists():
        for r in json.loads(report.read_text())["records"]:
            if r["id"] == args.id:
                stored = r["descriptor"]
    rec = replay_record(row, descriptor_text=stored)
    print(_outcome_line(rec))
    same = (rec.outcome.value == row["outcome"] and rec.due_detail == row["due_detail"]
            and str(rec.sdc_count) == row["sdc_count"] and str(rec.dyn_count) == row["dyn_count"]
            and str(rec.activations) == row["activations"])
    print("replay matches record" if same else "replay DIFFERS from record")
    return EXIT_OK if same else 1


def _cmd_report(args) -> int:
    d = Path(args.dir)
    problems = []
    found = False
    if (d / "epr.csv").exists():
        found = True
        with (d / "epr.csv").open(newline="") as fh:
            for row in csv.DictReader(fh):
                n = int(row["n"])
                if int(row["masked"]) + int(row["sdc"]) + int(row["due"]) != n:
                    problems.append(f"epr.csv {row['model']}/{row['workload']}: counts != n")
        if (d / "records.csv").exists():
            with (d / "records.csv").open(newline="") as fh:
                recs = list(csv.DictReader(fh))
            ids = [int(r["id"]) for r in recs]
            if ids != sorted(ids) or len(set(ids)) != len(ids):
                problems.append("records.csv: ids not unique and ascending")
            print(f"records: {len(recs)}")
    if (d / "taxonomy.csv").exists():
        found = True
        with (d / "taxonomy.csv").open(newline="") as fh:
            for row in csv.DictReader(fh):
                classes = [c.value.lower() for c in FaultClass]
                total = sum(int(row[c]) for c in classes)
                pct = sum(float(row["pct_" + c]) for c in classes)
                if total != int(row["sites_total"]):
                    problems.append(f"taxonomy.csv {row['unit']}: class counts != sites")
                print(f"{row['unit']}: sites={row['sites_total']} pct_sum={pct:.1f}")
    if not found:
        raise ConfigError(f"{d}: no campaign CSVs found")
    for msg in problems:
        print(msg, file=sys.stderr)
    print("report ok" if not problems else f"{len(problems)} problems")
    return EXIT_OK if not problems else 1


def _cmd_kernels(args) -> int:
    if args.name:
        print(get_workload(args.name).source.strip())
        return EXIT_OK
    for w in SUITE:
        print(f"{w.name:14s} grid={w.grid:<3d} block={w.block:<4d} "
              f"shared={'yes' if w.uses_shared else 'no ':3s} {w.description}")
    return EXIT_OK


_COMMANDS = {"asm": _cmd_asm, "run": _cmd_run, "profile": _cmd_profile,
             "gate-campaign": _cmd_gate, "sw-campaign": _cmd_sw, "replay": _cmd_replay,
             "report": _cmd_report, "kernels": _cmd_kernels}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    with np.errstate(all="ignore"):
        try:
            return _COMMANDS[args.cmd](args)
        except OracleMismatch as exc:
            print(f"oracle failure: {exc}", file=sys.stderr)
            return EXIT_ORACLE
        except (ConfigError, KeyError, AsmError, FileNotFoundError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
