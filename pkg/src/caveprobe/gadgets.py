"""Gadget discovery over probed pages and chain construction.

The catalog is a census: every byte offset in every accessible page where a
known instruction pattern occurs, overlapping and unaligned occurrences
included.  x86 decodes from any byte, so a pattern found mid-"instruction"
is just as executable as an intended one.
"""

from __future__ import annotations

from dataclasses import dataclass

from .memspace import PAGE_SIZE, AddressSpace
from .explorer import PageMap
from .machine import SYS_MPROTECT

CHAIN_VARIANTS = ("sound-5", "short-4")


@dataclass(frozen=True, slots=True)
class GadgetSpec:
    """A named byte pattern plus the instruction sequence it decodes to."""

    name: str
    pattern: bytes
    semantics: tuple[str, ...]


def default_gadget_specs() -> tuple[GadgetSpec, ...]:
    """The pattern set the chain builder knows how to use."""
    return (
        GadgetSpec("pop-rdi-ret", b"\x5f\xc3", ("pop rdi", "ret")),
        GadgetSpec("pop-rsi-ret", b"\x5e\xc3", ("pop rsi", "ret")),
        GadgetSpec("pop-rdx-ret", b"\x5a\xc3", ("pop rdx", "ret")),
        GadgetSpec("pop-rax-ret", b"\x58\xc3", ("pop rax", "ret")),
        GadgetSpec("pop-rbp-ret", b"\x5d\xc3", ("pop rbp", "ret")),
        GadgetSpec("syscall", b"\x0f\x05", ("syscall",)),
        GadgetSpec("leave-ret", b"\xc9\xc3", ("leave", "ret")),
    )


@dataclass(frozen=True, slots=True)
class GadgetCatalog:
    """Census result: every address per gadget kind, sorted ascending."""

    found: dict[str, tuple[int, ...]]
    searched_pages: int

    def lowest(self, name: str) -> int | None:
        addrs = self.found.get(name)
        return addrs[0] if addrs else None


class MissingGadgetError(Exception):
    """A required gadget kind has no occurrence at all."""

    def __init__(self, missing: list[str]):
        super().__init__("missing gadget kinds: " + ", ".join(sorted(missing)))
        self.missing = tuple(sorted(missing))


def find_gadgets(
    space: AddressSpace,
    pagemap: PageMap,
    specs: tuple[GadgetSpec, ...] | None = None,
) -> GadgetCatalog:
    """Scan every page the pagemap marks accessible for every spec pattern.

    Pages never probed accessible are never read.  A pattern straddling two
    adjacent accessible pages counts too, since execution would cross the
    boundary just as happily.
    """
    if specs is None:
        specs = default_gadget_specs()
    max_len = max(len(s.pattern) for s in specs)
    accessible = set(pagemap.accessible_pages())
    hits: dict[str, list[int]] = {s.name: [] for s in specs}
    for base in sorted(accessible):
        buf = space.read_bytes(base, PAGE_SIZE)
        if base + PAGE_SIZE in accessible and max_len > 1:
            buf += space.read_bytes(base + PAGE_SIZE, max_len - 1)
        for spec in specs:
            pos = buf.find(spec.pattern)
            while pos != -1:
                if pos < PAGE_SIZE:
                    hits[spec.name].append(base + pos)
                pos = buf.find(spec.pattern, pos + 1)
    return GadgetCatalog(
        found={name: tuple(addrs) for name, addrs in hits.items()},
        searched_pages=len(accessible),
    )


@dataclass(frozen=True, slots=True)
class ChainWord:
    value: int
    role: str  # "gadget-address" | "immediate" | "resume-address"


@dataclass(frozen=True, slots=True)
class RopChain:
    words: tuple[ChainWord, ...]

    def __post_init__(self) -> None:
        if not self.words or self.words[0].role != "gadget-address":
            raise ValueError("a chain must start with a gadget address")

    def to_bytes(self) -> bytes:
        return b"".join(w.value.to_bytes(8, "little") for w in self.words)

    def byte_len(self) -> int:
        return 8 * len(self.words)


def required_kinds(variant: str) -> tuple[str, ...]:
    """Gadget kinds a chain variant consumes."""
    if variant == "sound-5":
        return ("pop-rdi-ret", "pop-rsi-ret", "pop-rdx-ret", "pop-rax-ret", "syscall")
    if variant == "short-4":
        # the shorter variant drops the rdx load and trusts the register to
        # already hold the protection value when the pivot begins
        return ("pop-rdi-ret", "pop-rsi-ret", "pop-rax-ret", "syscall")
    raise ValueError(f"unknown chain variant {variant!r}")


def _pick_syscall(catalog: GadgetCatalog, space: AddressSpace | None) -> int:
    """Choose the syscall site.  The chain continues past the call only if
    the bytes after it fall through into a ret, so when the space is
    available prefer the lowest occurrence followed by C3; otherwise take
    the lowest occurrence as for any other kind."""
    addrs = catalog.found.get("syscall") or ()
    if space is not None:
        for addr in addrs:
            page = space.get_page(addr + 2)
            if page is not None and page.data[(addr + 2) % PAGE_SIZE] == 0xC3:
                return addr
    return addrs[0]


def build_mprotect_chain(
    catalog: GadgetCatalog,
    cave_addr: int,
    cave_len: int,
    prot_value: int,
    variant: str = "sound-5",
    space: AddressSpace | None = None,
) -> RopChain:
    """Build the argument-loading chain for one memory-protection syscall.

    The default variant loads all three arguments; "short-4" omits the rdx
    gadget.  Every kind resolves to its lowest cataloged address.  The chain
    ends with the syscall word; the caller appends the continuation word the
    falling-through ret will consume.
    """
    if cave_addr % PAGE_SIZE:
        raise ValueError("cave address must be page aligned")
    if cave_len <= 0 or cave_len % PAGE_SIZE:
        raise ValueError("cave length must be a positive page multiple")
    kinds = required_kinds(variant)
    missing = [k for k in kinds if not catalog.found.get(k)]
    if missing:
        raise MissingGadgetError(missing)

    g = lambda name: ChainWord(catalog.lowest(name), "gadget-address")
    imm = lambda v: ChainWord(v, "immediate")
    words = [g("pop-rdi-ret"), imm(cave_addr), g("pop-rsi-ret"), imm(cave_len)]
    if variant == "sound-5":
        words += [g("pop-rdx-ret"), imm(prot_value)]
    words += [
        g("pop-rax-ret"),
        imm(SYS_MPROTECT),
        ChainWord(_pick_syscall(catalog, space), "gadget-address"),
    ]
    return RopChain(tuple(words))
