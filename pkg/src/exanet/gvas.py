"""80-bit global virtual addresses and protection-domain checks.

Layout (most significant first): pdid:16 | node:22 | rank:3 | va:39.
The canonical wire form is 10 bytes, big-endian.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

FIELDS = (("pdid", 16), ("node", 22), ("rank", 3), ("va", 39))
WIDTHS = dict(FIELDS)
TOTAL_BITS = sum(w for _, w in FIELDS)
WIRE_BYTES = TOTAL_BITS // 8

# bit offset of each field's least significant bit
_SHIFTS = {}
_off = TOTAL_BITS
for _name, _w in FIELDS:
    _off -= _w
    _SHIFTS[_name] = _off
del _off, _name, _w


class FieldOverflow(ValueError):
    def __init__(self, field_name: str, value: int):
        super().__init__(f"{field_name}={value} does not fit in {WIDTHS[field_name]} bits")
        self.field_name = field_name
        self.value = value


class Protection(Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass(frozen=True, order=True)
class GlobalVirtualAddress:
    pdid: int
    node: int
    rank: int
    va: int

    def __post_init__(self):
        for name, width in FIELDS:
            v = getattr(self, name)
            if v < 0 or v >> width:
                raise FieldOverflow(name, v)

    @property
    def value(self) -> int:
        return pack_address(self.pdid, self.node, self.rank, self.va)

    @property
    def node_va(self) -> int:
        """42-bit node-level virtual address (rank concatenated with va)."""
        return (self.rank << WIDTHS["va"]) | self.va

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(WIRE_BYTES, "big")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GlobalVirtualAddress":
        if len(raw) != WIRE_BYTES:
            raise ValueError(f"expected {WIRE_BYTES} bytes, got {len(raw)}")
        return cls(*unpack_address(int.from_bytes(raw, "big")))

    @classmethod
    def from_value(cls, value: int) -> "GlobalVirtualAddress":
        return cls(*unpack_address(value))

    def with_offset(self, delta: int) -> "GlobalVirtualAddress":
        return GlobalVirtualAddress(self.pdid, self.node, self.rank, self.va + delta)


def pack_address(pdid: int, node: int, rank: int, va: int) -> int:
    out = 0
    for (name, width), v in zip(FIELDS, (pdid, node, rank, va)):
        if v < 0 or v >> width:
            raise FieldOverflow(name, v)
        out |= v << _SHIFTS[name]
    return out


def unpack_address(addr: int) -> tuple[int, int, int, int]:
    if addr < 0 or addr >> TOTAL_BITS:
        raise ValueError(f"address {addr:#x} is wider than {TOTAL_BITS} bits")
    return tuple((addr >> _SHIFTS[name]) & ((1 << w) - 1) for name, w in FIELDS)


def check_protection(packet_pdid: int, endpoint_pdid: int) -> Protection:
    return Protection.ACCEPT if packet_pdid == endpoint_pdid else Protection.REJECT
