"""The thirteen instruction-level permanent error models."""

from __future__ import annotations

import enum


class ErrorModel(str, enum.Enum):
    IOC = "IOC"     # operation code replaced by another valid one
    IVOC = "IVOC"   # operation code replaced by an invalid one
    IRA = "IRA"     # wrong but existing register addressed
    IVRA = "IVRA"   # register index beyond the per-thread limit
    IIO = "IIO"     # immediate operand corrupted
    WV = "WV"       # predicate / control-flow value corrupted
    IPP = "IPP"     # per-warp shared resources (alias of another model)
    IAT = "IAT"     # wrong thread indexes
    IAW = "IAW"     # wrong warp assignment
    IAC = "IAC"     # wrong CTA assignment
    IAL = "IAL"     # lanes disabled or force-enabled
    IMS = "IMS"     # wrong memory source for loads
    IMD = "IMD"     # wrong memory destination for stores


ALL_MODELS: tuple[ErrorModel, ...] = tuple(ErrorModel)

# IPP is realized through one of these concrete models.
IPP_TARGETS: tuple[ErrorModel, ...] = (
    ErrorModel.IRA, ErrorModel.IVRA, ErrorModel.IMS, ErrorModel.IMD,
    ErrorModel.IAT, ErrorModel.IAW,
)

# Models that affect every thread of a selected warp; the rest honor thread_set.
WARP_WIDE: frozenset[ErrorModel] = frozenset({
    ErrorModel.IOC, ErrorModel.IVOC, ErrorModel.IRA, ErrorModel.IVRA,
    ErrorModel.IPP, ErrorModel.IAW,
})

OPERATION_GROUP = (ErrorModel.IOC, ErrorModel.IRA, ErrorModel.IVRA, ErrorModel.IIO)
PARALLEL_GROUP = (ErrorModel.IAT, ErrorModel.IAW, ErrorModel.WV)


def parse_model(text: str) -> ErrorModel:
    try:
        return ErrorModel(text.strip().upper())
    except ValueError:
        raise ValueError(f"unknown error model {text!r}") from None
