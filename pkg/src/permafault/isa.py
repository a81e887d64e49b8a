"""Mini SASS-like SIMT instruction set and its fixed 32-bit encoding.

Field layout of an encoded word (bit 31 is the most significant)::

    31    26 25 23 22  21  17 16  12 11   7  6   5    0
   | opcode |pred |neg|  dst  | src1 | src2 |imm|  aux  |

* ``pred`` is the guard predicate (7 = always true), ``neg`` inverts it.
* ``imm`` is the has-immediate flag.  When set, the second operand of an ALU
  instruction is the 11-bit signed value ``{src2, aux}`` instead of ``R[src2]``.
* ``aux`` holds ``src3`` in its low five bits for three-source instructions
  (IMAD, FFMA) and the selector predicate in its low three bits for SEL.
* LDI carries a 16-bit signed immediate ``{src1, src2, aux}``.
* BRA carries its absolute target in ``{src2, aux}`` (11 bits, unsigned) and
  its reconvergence index in ``{dst, src1}`` (10 bits, 1023 = none).
* ISETP/FSETP write predicate ``dst[2:0]`` using comparison ``dst[4:3]``.
* S2R reads the special register numbered ``src2``.

Every raw field is kept on :class:`Instruction`, so ``encode(decode(w)) == w``
for every word whose opcode field is assigned.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

WORD_MASK = 0xFFFFFFFF
NUM_REGS = 32
TRUE_PRED = 7
NO_RECONV = 0x3FF
MAX_PROGRAM_LEN = NO_RECONV
# Fetching outside the program yields an all-ones word (opcode 63, unassigned).
ILLEGAL_WORD = 0xFFFFFFFF

# (name, lsb, width) in encoding order, most significant first.
FIELDS: tuple[tuple[str, int, int], ...] = (
    ("opcode", 26, 6),
    ("pred", 23, 3),
    ("pred_neg", 22, 1),
    ("dst", 17, 5),
    ("src1", 12, 5),
    ("src2", 7, 5),
    ("has_imm", 6, 1),
    ("aux", 0, 6),
)


class OpClass(str, enum.Enum):
    INT = "INT"
    FP32 = "FP32"
    SFU = "SFU-like"
    MEM_LOAD = "MEM-LOAD"
    MEM_STORE = "MEM-STORE"
    CONTROL = "CONTROL"
    SPECIAL = "SPECIAL"
    SYNC = "SYNC"


class MemSpace(enum.IntEnum):
    NONE = 0
    GLOBAL = 1
    SHARED = 2
    CONSTANT = 3


class SpecialReg(enum.IntEnum):
    SR_TID_X = 0
    SR_CTAID_X = 1
    SR_NTID_X = 2
    SR_NCTAID_X = 3
    SR_LANEID = 4
    SR_WARPID = 5


class Cmp(enum.IntEnum):
    LT = 0
    LE = 1
    EQ = 2
    NE = 3


class Opcode(enum.IntEnum):
    """Assigned opcodes, numbered in listing order from 0.

    Codes 28..63 are unassigned and decode to :class:`IllegalInstruction`.
    """

    NOP = 0
    IADD = 1
    ISUB = 2
    IMUL = 3
    IMAD = 4
    AND = 5
    OR = 6
    XOR = 7
    SHL = 8
    SHR = 9
    FADD = 10
    FMUL = 11
    FFMA = 12
    FRCP = 13
    ISETP = 14
    FSETP = 15
    SEL = 16
    MOV = 17
    LDI = 18
    S2R = 19
    BRA = 20
    EXIT = 21
    LDG = 22
    STG = 23
    LDS = 24
    STS = 25
    LDC = 26
    BAR = 27

    @property
    def op_class(self) -> OpClass:
        return OP_CLASS[self]

    @property
    def mem_space(self) -> MemSpace:
        return OP_MEM_SPACE.get(self, MemSpace.NONE)


VALID_CODES = frozenset(int(op) for op in Opcode)

OP_CLASS: dict[Opcode, OpClass] = {
    Opcode.NOP: OpClass.SPECIAL,
    Opcode.IADD: OpClass.INT,
    Opcode.ISUB: OpClass.INT,
    Opcode.IMUL: OpClass.INT,
    Opcode.IMAD: OpClass.INT,
    Opcode.AND: OpClass.INT,
    Opcode.OR: OpClass.INT,
    Opcode.XOR: OpClass.INT,
    Opcode.SHL: OpClass.INT,
    Opcode.SHR: OpClass.INT,
    Opcode.FADD: OpClass.FP32,
    Opcode.FMUL: OpClass.FP32,
    Opcode.FFMA: OpClass.FP32,
    Opcode.FRCP: OpClass.SFU,
    Opcode.ISETP: OpClass.INT,
    Opcode.FSETP: OpClass.FP32,
    Opcode.SEL: OpClass.INT,
    Opcode.MOV: OpClass.INT,
    Opcode.LDI: OpClass.INT,
    Opcode.S2R: OpClass.SPECIAL,
    Opcode.BRA: OpClass.CONTROL,
    Opcode.EXIT: OpClass.CONTROL,
    Opcode.LDG: OpClass.MEM_LOAD,
    Opcode.STG: OpClass.MEM_STORE,
    Opcode.LDS: OpClass.MEM_LOAD,
    Opcode.STS: OpClass.MEM_STORE,
    Opcode.LDC: OpClass.MEM_LOAD,
    Opcode.BAR: OpClass.SYNC,
}

OP_MEM_SPACE = {
    Opcode.LDG: MemSpace.GLOBAL,
    Opcode.STG: MemSpace.GLOBAL,
    Opcode.LDS: MemSpace.SHARED,
    Opcode.STS: MemSpace.SHARED,
    Opcode.LDC: MemSpace.CONSTANT,
}

# Operand shapes.
BINARY_OPS = frozenset({
    Opcode.IADD, Opcode.ISUB, Opcode.IMUL, Opcode.AND, Opcode.OR, Opcode.XOR,
    Opcode.SHL, Opcode.SHR, Opcode.FADD, Opcode.FMUL,
})
TERNARY_OPS = frozenset({Opcode.IMAD, Opcode.FFMA})
UNARY_OPS = frozenset({Opcode.MOV, Opcode.FRCP})
SETP_OPS = frozenset({Opcode.ISETP, Opcode.FSETP})
LOAD_OPS = frozenset({Opcode.LDG, Opcode.LDS, Opcode.LDC})
STORE_OPS = frozenset({Opcode.STG, Opcode.STS})
# Instructions that accept the ``#imm`` second-operand form.
IMM_CAPABLE = BINARY_OPS | SETP_OPS


def sext(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class IllegalInstruction:
    """Decode result for a word whose opcode field is unassigned."""

    word: int

    @property
    def opcode_field(self) -> int:
        return (self.word >> 26) & 0x3F


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    pred: int = TRUE_PRED
    pred_neg: bool = False
    dst: int = 0
    src1: int = 0
    src2: int = 0
    has_imm: bool = False
    aux: int = 0
    # derived views, filled in __post_init__
    _imm: int | None = field(default=None, init=False, repr=False, compare=False)
    _regs: dict = field(default=None, init=False, repr=False, compare=False)
    _max_reg: int = field(default=-1, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        limits = {"pred": 8, "dst": 32, "src1": 32, "src2": 32, "aux": 64}
        for name, lim in limits.items():
            v = getattr(self, name)
            if not isinstance(v, int) or not 0 <= v < lim:
                raise EncodingError(f"{name}={v!r} out of range [0, {lim})")
        if not isinstance(self.opcode, Opcode):
            raise EncodingError(f"opcode must be an Opcode, got {self.opcode!r}")
        object.__setattr__(self, "_imm", self._compute_imm())
        object.__setattr__(self, "_regs", self._compute_regs())
        object.__setattr__(self, "_max_reg", max(self._regs.values(), default=-1))

    def _compute_imm(self) -> int | None:
        op = self.opcode
        if op is Opcode.LDI:
            return sext((self.src1 << 11) | (self.src2 << 6) | self.aux, 16)
        if op is Opcode.BRA:
            return (self.src2 << 6) | self.aux
        if self.has_imm:
            return sext((self.src2 << 6) | self.aux, 11)
        return None

    @property
    def mnemonic(self) -> str:
        return self.opcode.name

    @property
    def op_class(self) -> OpClass:
        return OP_CLASS[self.opcode]

    @property
    def mem_space(self) -> MemSpace:
        return OP_MEM_SPACE.get(self.opcode, MemSpace.NONE)

    @property
    def imm(self) -> int | None:
        """Immediate operand value, or None when the instruction has none."""
        return self._imm

    @property
    def uses_imm_operand(self) -> bool:
        """True for instructions carrying a data immediate (not a branch target)."""
        return self.opcode is Opcode.LDI or (self.has_imm and self.opcode in IMM_CAPABLE)

    @property
    def src3(self) -> int:
        return self.aux & 0x1F

    @property
    def special_reg(self) -> SpecialReg | None:
        if self.opcode is not Opcode.S2R:
            return None
        try:
            return SpecialReg(self.src2)
        except ValueError:
            return None

    @property
    def pdst(self) -> int:
        return self.dst & 0x7

    @property
    def cmp(self) -> Cmp:
        return Cmp(self.dst >> 3)

    @property
    def sel_pred(self) -> int:
        return self.aux & 0x7

    @property
    def target(self) -> int:
        return (self.src2 << 6) | self.aux

    @property
    def reconv(self) -> int | None:
        r = (self.dst << 5) | self.src1
        return None if r == NO_RECONV else r

    # operand roles -----------------------------------------------------

    def reg_operands(self) -> dict[int, int]:
        """Register operands by position: 0 = destination, 1..3 = sources."""
        return dict(self._regs)

    @property
    def max_reg(self) -> int:
        """Highest register index referenced, or -1 when there is none."""
        return self._max_reg

    def _compute_regs(self) -> dict[int, int]:
        op = self.opcode
        out: dict[int, int] = {}
        if op in BINARY_OPS or op is Opcode.SEL:
            out[0] = self.dst
            out[1] = self.src1
            if not self.has_imm:
                out[2] = self.src2
        elif op in TERNARY_OPS:
            out[0] = self.dst
            out[1] = self.src1
            if not self.has_imm:
                out[2] = self.src2
            out[3] = self.src3
        elif op in UNARY_OPS:
            out[0] = self.dst
            out[1] = self.src1
        elif op in SETP_OPS:
            out[1] = self.src1
            if not self.has_imm:
                out[2] = self.src2
        elif op in (Opcode.LDI, Opcode.S2R):
            out[0] = self.dst
        elif op in LOAD_OPS:
            out[0] = self.dst
            out[1] = self.src1
        elif op in STORE_OPS:
            out[1] = self.src1
            out[2] = self.src2
        return out

    @property
    def writes_register(self) -> bool:
        return 0 in self._regs

    @property
    def writes_predicate(self) -> bool:
        return self.opcode in SETP_OPS


def encode_fields(opcode: int, pred: int, pred_neg: int, dst: int, src1: int,
                  src2: int, has_imm: int, aux: int) -> int:
    return ((opcode << 26) | (pred << 23) | (pred_neg << 22) | (dst << 17)
            | (src1 << 12) | (src2 << 7) | (has_imm << 6) | aux)


def split_fields(word: int) -> dict[str, int]:
    return {name: (word >> lsb) & ((1 << width) - 1) for name, lsb, width in FIELDS}


def encode(instr: Instruction) -> int:
    """Pack an :class:`Instruction` into its 32-bit word."""
    if not isinstance(instr, Instruction):
        raise EncodingError(f"cannot encode {instr!r}")
    return encode_fields(int(instr.opcode), instr.pred, int(instr.pred_neg), instr.dst,
                         instr.src1, instr.src2, int(instr.has_imm), instr.aux)


def decode(word: int) -> Instruction | IllegalInstruction:
    """Total decoder: every 32-bit value maps to an instruction or an illegal marker."""
    word &= WORD_MASK
    f = split_fields(word)
    if f["opcode"] not in VALID_CODES:
        return IllegalInstruction(word)
    return Instruction(
        opcode=Opcode(f["opcode"]), pred=f["pred"], pred_neg=bool(f["pred_neg"]),
        dst=f["dst"], src1=f["src1"], src2=f["src2"], has_imm=bool(f["has_imm"]),
        aux=f["aux"],
    )


# Constructors that lay immediates out across the raw fields -------------

def _imm11_fields(value: int) -> tuple[int, int]:
    if not -1024 <= value <= 1023:
        raise EncodingError(f"immediate {value} does not fit 11 signed bits")
    v = value & 0x7FF
    return v >> 6, v & 0x3F


def make_alu(op: Opcode, dst: int, src1: int, src2: int | None = None, *,
             imm: int | None = None, src3: int = 0, pred: int = TRUE_PRED,
             pred_neg: bool = False) -> Instruction:
    if imm is not None:
        hi, lo = _imm11_fields(imm)
        return Instruction(op, pred, pred_neg, dst, src1, hi, True, lo)
    return Instruction(op, pred, pred_neg, dst, src1, src2 or 0, False, src3)


def make_ldi(dst: int, value: int, *, pred: int = TRUE_PRED, pred_neg: bool = False) -> Instruction:
    if not -32768 <= value <= 32767:
        raise EncodingError(f"LDI immediate {value} does not fit 16 signed bits")
    v = value & 0xFFFF
    return Instruction(Opcode.LDI, pred, pred_neg, dst, v >> 11, (v >> 6) & 0x1F, True, v & 0x3F)


def make_setp(op: Opcode, cmp: Cmp, pdst: int, src1: int, src2: int | None = None, *,
              imm: int | None = None, pred: int = TRUE_PRED, pred_neg: bool = False) -> Instruction:
    if not 0 <= pdst <= 6:
        raise EncodingError(f"predicate destination P{pdst} is not writable")
    return make_alu(op, (int(cmp) << 3) | pdst, src1, src2, imm=imm, pred=pred, pred_neg=pred_neg)


def make_bra(target: int, reconv: int | None = None, *, pred: int = TRUE_PRED,
             pred_neg: bool = False) -> Instruction:
    if not 0 <= target < 2048:
        raise EncodingError(f"branch target {target} out of range")
    r = NO_RECONV if reconv is None else reconv
    if not 0 <= r <= NO_RECONV:
        raise EncodingError(f"reconvergence index {reconv} out of range")
    return Instruction(Opcode.BRA, pred, pred_neg, r >> 5, r & 0x1F, target >> 6, True, target & 0x3F)
