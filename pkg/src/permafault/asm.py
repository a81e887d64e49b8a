"""Assembler, disassembler and binary program files for the mini ISA.

Source grammar, one statement per line::

    LABEL:
        [@P<k> | @!P<k>] MNEMONIC[.CMP] operand, operand ...   ; comment
        .reconv LABEL        ; reconvergence point of the next BRA
        .word 0x12345678     ; raw word

Operands are ``R<n>``, ``P<n>``, ``#<imm>``, ``SR_<NAME>``, ``[R<n>]`` or a
label (BRA only).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .isa import (
    BINARY_OPS, LOAD_OPS, MAX_PROGRAM_LEN, SETP_OPS, STORE_OPS, TERNARY_OPS, TRUE_PRED,
    UNARY_OPS, Cmp, EncodingError, IllegalInstruction, Instruction, Opcode, SpecialReg,
    decode, encode, make_alu, make_bra, make_ldi, make_setp,
)

MAGIC = b"PFSM"
FILE_VERSION = 1
INDENT = "    "


class AsmError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class KernelProgram:
    name: str
    words: tuple[int, ...]
    labels: Mapping[str, int] = field(default_factory=dict)
    entry: int = 0

    def __len__(self) -> int:
        return len(self.words)

    def instructions(self) -> list[Instruction | IllegalInstruction]:
        return [decode(w) for w in self.words]


# --------------------------------------------------------------------------
# assemble

_LABEL_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*):$")
_GUARD_RE = re.compile(r"^@(!?)P([0-9]+)$")
_REG_RE = re.compile(r"^R([0-9]+)$")
_PRED_RE = re.compile(r"^P([0-9]+)$")
_MEM_RE = re.compile(r"^\[\s*R([0-9]+)\s*\]$")
_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def _strip_comment(line: str) -> str:
    for marker in (";", "//"):
        pos = line.find(marker)
        if pos >= 0:
            line = line[:pos]
    return line.strip()


def _reg(tok: str, lineno: int) -> int:
    m = _REG_RE.match(tok)
    if not m:
        raise AsmError(f"expected register, got {tok!r}", lineno)
    n = int(m.group(1))
    if n > 31:
        raise AsmError(f"register R{n} out of range (max R31)", lineno)
    return n


def _pred(tok: str, lineno: int) -> int:
    m = _PRED_RE.match(tok)
    if not m:
        raise AsmError(f"expected predicate, got {tok!r}", lineno)
    n = int(m.group(1))
    if n > 7:
        raise AsmError(f"predicate P{n} out of range (max P7)", lineno)
    return n


def _imm(tok: str, lineno: int) -> int:
    if not tok.startswith("#"):
        raise AsmError(f"expected immediate, got {tok!r}", lineno)
    try:
        return int(tok[1:], 0)
    except ValueError:
        raise AsmError(f"bad immediate {tok!r}", lineno) from None


def _mem(tok: str, lineno: int) -> int:
    m = _MEM_RE.match(tok)
    if not m:
        raise AsmError(f"expected memory operand [R<n>], got {tok!r}", lineno)
    n = int(m.group(1))
    if n > 31:
        raise AsmError(f"register R{n} out of range (max R31)", lineno)
    return n


def _split_operands(text: str) -> list[str]:
    text = text.strip()
    if not text:
        return []
    return [t.strip() for t in text.split(",")]


def _parse_instruction(text: str, lineno: int, labels: Mapping[str, int],
                       reconv: int | None) -> Instruction:
    tokens = text.split(None, 1)
    pred, neg = TRUE_PRED, False
    if tokens[0].startswith("@"):
        m = _GUARD_RE.match(tokens[0])
        if not m:
            raise AsmError(f"bad guard {tokens[0]!r}", lineno)
        neg = m.group(1) == "!"
        pred = int(m.group(2))
        if pred > 7:
            raise AsmError(f"predicate P{pred} out of range (max P7)", lineno)
        if len(tokens) < 2:
            raise AsmError("guard without instruction", lineno)
        tokens = tokens[1].split(None, 1)
    head = tokens[0].upper()
    ops = _split_operands(tokens[1] if len(tokens) > 1 else "")
    mnemonic, _, suffix = head.partition(".")
    try:
        op = Opcode[mnemonic]
    except KeyError:
        raise AsmError(f"unknown mnemonic {mnemonic!r}", lineno) from None
    if suffix and op not in SETP_OPS:
        raise AsmError(f"{mnemonic} takes no suffix", lineno)
    if reconv is not None and op is not Opcode.BRA:
        raise AsmError(".reconv must precede a BRA", lineno)

    def want(n: int) -> None:
        if len(ops) != n:
            raise AsmError(f"{mnemonic} expects {n} operand(s), got {len(ops)}", lineno)

    g = {"pred": pred, "pred_neg": neg}
    try:
        if op in (Opcode.NOP, Opcode.EXIT, Opcode.BAR):
            want(0)
            return Instruction(op, **g)
        if op in BINARY_OPS:
            want(3)
            if ops[2].startswith("#"):
                return make_alu(op, _reg(ops[0], lineno), _reg(ops[1], lineno),
                                imm=_imm(ops[2], lineno), **g)
            return make_alu(op, _reg(ops[0], lineno), _reg(ops[1], lineno),
                            _reg(ops[2], lineno), **g)
        if op in TERNARY_OPS:
            want(4)
            return make_alu(op, _reg(ops[0], lineno), _reg(ops[1], lineno), _reg(ops[2], lineno),
                            src3=_reg(ops[3], lineno), **g)
        if op in UNARY_OPS:
            want(2)
            return make_alu(op, _reg(ops[0], lineno), _reg(ops[1], lineno), **g)
        if op in SETP_OPS:
            want(3)
            if not suffix:
                raise AsmError(f"{mnemonic} needs a comparison suffix", lineno)
            try:
                cmp = Cmp[suffix]
            except KeyError:
                raise AsmError(f"unknown comparison {suffix!r}", lineno) from None
            pd = _pred(ops[0], lineno)
            if pd == TRUE_PRED:
                raise AsmError("P7 is not writable", lineno)
            if ops[2].startswith("#"):
                return make_setp(op, cmp, pd, _reg(ops[1], lineno), imm=_imm(ops[2], lineno), **g)
            return make_setp(op, cmp, pd, _reg(ops[1], lineno), _reg(ops[2], lineno), **g)
        if op is Opcode.SEL:
            want(4)
            return make_alu(op, _reg(ops[0], lineno), _reg(ops[1], lineno), _reg(ops[2], lineno),
                            src3=_pred(ops[3], lineno), **g)
        if op is Opcode.LDI:
            want(2)
            return make_ldi(_reg(ops[0], lineno), _imm(ops[1], lineno), **g)
        if op is Opcode.S2R:
            want(2)
            try:
                sr = SpecialReg[ops[1].upper()]
            except KeyError:
                raise AsmError(f"unknown special register {ops[1]!r}", lineno) from None
            return Instruction(op, dst=_reg(ops[0], lineno), src2=int(sr), **g)
        if op is Opcode.BRA:
            want(1)
            tgt = ops[0]
            if tgt not in labels:
                raise AsmError(f"undefined label {tgt!r}", lineno)
            return make_bra(labels[tgt], reconv, **g)
        if op in LOAD_OPS:
            want(2)
            return Instruction(op, dst=_reg(ops[0], lineno), src1=_mem(ops[1], lineno), **g)
        if op in STORE_OPS:
            want(2)
            return Instruction(op, src1=_mem(ops[0], lineno), src2=_reg(ops[1], lineno), **g)
    except EncodingError as exc:
        raise AsmError(str(exc), lineno) from None
    raise AsmError(f"unhandled mnemonic {mnemonic}", lineno)  # pragma: no cover


def assemble(source: str, name: str = "kernel", *, check_exit: bool = True) -> KernelProgram:
    """Assemble kernel source text into a label-resolved program."""
    statements: list[tuple[int, str]] = []
    labels: dict[str, int] = {}
    count = 0
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        m = _LABEL_RE.match(line)
        if m:
            label = m.group(1)
            if label in labels:
                raise AsmError(f"duplicate label {label!r}", lineno)
            labels[label] = count
            continue
        statements.append((lineno, line))
        if not line.startswith(".reconv"):
            count += 1
    if count > MAX_PROGRAM_LEN:
        raise AsmError(f"program too long ({count} > {MAX_PROGRAM_LEN})")

    words: list[int] = []
    pending_reconv: int | None = None
    for lineno, line in statements:
        if line.startswith("."):
            directive, _, arg = line.partition(" ")
            arg = arg.strip()
            if directive == ".reconv":
                if arg not in labels:
                    raise AsmError(f"undefined label {arg!r}", lineno)
                if pending_reconv is not None:
                    raise AsmError("two .reconv directives for one BRA", lineno)
                pending_reconv = labels[arg]
            elif directive == ".word":
                if pending_reconv is not None:
                    raise AsmError(".reconv must precede a BRA", lineno)
                try:
                    words.append(int(arg, 0) & 0xFFFFFFFF)
                except ValueError:
                    raise AsmError(f"bad .word value {arg!r}", lineno) from None
            else:
                raise AsmError(f"unknown directive {directive!r}", lineno)
            continue
        instr = _parse_instruction(line, lineno, labels, pending_reconv)
        pending_reconv = None
        words.append(encode(instr))
    if pending_reconv is not None:
        raise AsmError("dangling .reconv at end of source")
    program = KernelProgram(name=name, words=tuple(words), labels=labels)
    if check_exit:
        _check_paths(program)
    return program


def _check_paths(program: KernelProgram) -> None:
    """Every reachable path must end in EXIT; branch targets must be in range."""
    n = len(program)
    if n == 0:
        raise AsmError("empty program")
    seen: set[int] = set()
    work = [program.entry]
    while work:
        pc = work.pop()
        if pc in seen:
            continue
        seen.add(pc)
        ins = decode(program.words[pc])
        succ: list[int] = []
        if isinstance(ins, IllegalInstruction):
            continue
        unconditional = ins.pred == TRUE_PRED and not ins.pred_neg
        if ins.opcode is Opcode.EXIT:
            if not unconditional:
                succ.append(pc + 1)
        elif ins.opcode is Opcode.BRA:
            if ins.target >= n:
                raise AsmError(f"branch at {pc} targets {ins.target} outside program")
            succ.append(ins.target)
            if not unconditional:
                succ.append(pc + 1)
        else:
            succ.append(pc + 1)
        for s in succ:
            if s >= n:
                raise AsmError(f"control falls off the end of the program after index {pc}")
            work.append(s)


# --------------------------------------------------------------------------
# disassemble

def format_instruction(ins: Instruction, label_of: Mapping[int, str] | None = None) -> str:
    """Canonical single-line text of an instruction (without indentation)."""
    op = ins.opcode
    name = op.name
    guard = ""
    if not (ins.pred == TRUE_PRED and not ins.pred_neg):
        guard = f"@{'!' if ins.pred_neg else ''}P{ins.pred} "
    if op in (Opcode.NOP, Opcode.EXIT, Opcode.BAR):
        body = name
    elif op in BINARY_OPS:
        b = f"#{ins.imm}" if ins.has_imm else f"R{ins.src2}"
        body = f"{name} R{ins.dst}, R{ins.src1}, {b}"
    elif op in TERNARY_OPS:
        body = f"{name} R{ins.dst}, R{ins.src1}, R{ins.src2}, R{ins.src3}"
    elif op in UNARY_OPS:
        body = f"{name} R{ins.dst}, R{ins.src1}"
    elif op in SETP_OPS:
        b = f"#{ins.imm}" if ins.has_imm else f"R{ins.src2}"
        body = f"{name}.{ins.cmp.name} P{ins.pdst}, R{ins.src1}, {b}"
    elif op is Opcode.SEL:
        body = f"{name} R{ins.dst}, R{ins.src1}, R{ins.src2}, P{ins.sel_pred}"
    elif op is Opcode.LDI:
        body = f"{name} R{ins.dst}, #{ins.imm}"
    elif op is Opcode.S2R:
        sr = ins.special_reg
        body = f"{name} R{ins.dst}, {sr.name if sr is not None else '?'}"
    elif op is Opcode.BRA:
        tgt = (label_of or {}).get(ins.target, f"L{ins.target}")
        body = f"{name} {tgt}"
    elif op in LOAD_OPS:
        body = f"{name} R{ins.dst}, [R{ins.src1}]"
    else:  # stores
        body = f"{name} [R{ins.src1}], R{ins.src2}"
    return guard + body


def disassemble(program: KernelProgram) -> str:
    """Canonical source text; ``assemble`` of the result reproduces the words."""
    n = len(program)
    names_at: dict[int, list[str]] = {}
    for lab, idx in program.labels.items():
        names_at.setdefault(idx, []).append(lab)
    taken = set(program.labels)

    def synth(idx: int) -> str:
        if idx in names_at:
            return names_at[idx][0]
        base = f"L{idx}"
        nm = base
        k = 0
        while nm in taken:
            k += 1
            nm = f"{base}_{k}"
        taken.add(nm)
        names_at[idx] = [nm]
        return nm

    decoded = program.instructions()
    # Give every in-range branch target / reconvergence point a label first.
    for ins in decoded:
        if isinstance(ins, Instruction) and ins.opcode is Opcode.BRA:
            if ins.target <= n:
                synth(ins.target)
            if ins.reconv is not None and ins.reconv <= n:
                synth(ins.reconv)
    label_of = {idx: names[0] for idx, names in names_at.items()}

    body: list[list[str]] = []
    for idx, (word, ins) in enumerate(zip(program.words, decoded)):
        lines: list[str] = []
        text = None
        if isinstance(ins, Instruction):
            text = format_instruction(ins, label_of)
            if ins.opcode is Opcode.BRA:
                ok = ins.target <= n and (ins.reconv is None or ins.reconv <= n)
                if ok and ins.reconv is not None:
                    lines.append(f"{INDENT}.reconv {label_of[ins.reconv]}")
                if not ok:
                    text = None
            if text is not None and _reencode(text, label_of, ins) != word:
                text = None
        if text is None:
            lines = [f"{INDENT}.word 0x{word:08X}"]
        else:
            lines.append(INDENT + text)
        body.append(lines)

    out: list[str] = []
    for idx in range(n + 1):
        for lab in names_at.get(idx, []):
            out.append(f"{lab}:")
        if idx < n:
            out.extend(body[idx])
    return "\n".join(out) + "\n"


def _reencode(text: str, label_of: Mapping[int, str], ins: Instruction) -> int:
    labels = {name: idx for idx, name in label_of.items()}
    try:
        return encode(_parse_instruction(text, 0, labels, ins.reconv if ins.opcode is Opcode.BRA else None))
    except AsmError:
        return -1


# --------------------------------------------------------------------------
# binary program files

def write_program(program: KernelProgram, path: str | Path) -> None:
    data = bytearray(MAGIC)
    data.append(FILE_VERSION)
    data += struct.pack("<I", len(program.words))
    data += struct.pack(f"<{len(program.words)}I", *program.words)
    Path(path).write_bytes(bytes(data))


def read_program(path: str | Path, name: str | None = None) -> KernelProgram:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise AsmError(f"{path}: bad magic {data[:4]!r}")
    if data[4] != FILE_VERSION:
        raise AsmError(f"{path}: unsupported version {data[4]}")
    (count,) = struct.unpack_from("<I", data, 5)
    if len(data) != 9 + 4 * count:
        raise AsmError(f"{path}: truncated program ({len(data)} bytes for {count} words)")
    words = struct.unpack_from(f"<{count}I", data, 9)
    return KernelProgram(name=name or Path(path).stem, words=tuple(words))
