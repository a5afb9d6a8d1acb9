"""Discovery of data caves: unused writable memory to hide a payload in.

A cave is a maximal run of adjacent pages that the write probe classifies
writable and whose bytes are all zero, meaning nothing appears to be using
them.  Content is only ever read after the write probe already said the
page is writable, so discovery stays fault-free.
"""

from __future__ import annotations

from dataclasses import dataclass

from .memspace import PAGE_SIZE, AddressSpace
from .explorer import PageMap
from .probe import Prober, Writability

_ZERO_PAGE = bytes(PAGE_SIZE)


@dataclass(frozen=True, slots=True)
class CaveRegion:
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length


class NoCaveError(Exception):
    """No discovered cave is large enough."""

    def __init__(self, need_len: int):
        super().__init__(f"no cave of at least {need_len:#x} bytes")
        self.need_len = need_len


def find_caves(
    space: AddressSpace,
    prober: Prober,
    pagemap: PageMap,
    min_len: int = PAGE_SIZE,
) -> list[CaveRegion]:
    """Collect maximal zero-filled writable runs of at least ``min_len``.

    Only pages the pagemap marks accessible are considered; each candidate
    is claw-probed, and its bytes are checked for zero only on a writable
    verdict.  Runs are maximal with respect to the probed set and returned
    sorted by address.
    """
    if min_len <= 0 or min_len % PAGE_SIZE:
        raise ValueError("min_len must be a positive page multiple")
    usable: set[int] = set()
    for base in pagemap.accessible_pages():
        if prober.claw(space, base) is not Writability.WRITABLE:
            continue
        if space.read_bytes(base, PAGE_SIZE) == _ZERO_PAGE:
            usable.add(base)

    caves: list[CaveRegion] = []
    for base in sorted(usable):
        if base - PAGE_SIZE in usable:
            continue  # interior page of a run already emitted
        end = base + PAGE_SIZE
        while end in usable:
            end += PAGE_SIZE
        if end - base >= min_len:
            caves.append(CaveRegion(base, end - base))
    return caves


def select_cave(caves: list[CaveRegion], need_len: int) -> CaveRegion:
    """First fit by address among caves large enough for ``need_len``."""
    if need_len <= 0:
        raise ValueError("need_len must be positive")
    for cave in sorted(caves, key=lambda c: c.start):
        if cave.length >= need_len:
            return cave
    raise NoCaveError(need_len)
