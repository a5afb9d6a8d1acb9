"""Page-granular model of a 64-bit virtual address space.

The model keeps a sparse dictionary of 4 KB pages, each carrying its own
permission bits and backing bytes.  Addresses are 48-bit canonical: the low
half [0, 2**47) belongs to user mappings, the high half [2**47, 2**48) is
reserved for kernel mappings, which may be loaded for realism but are never
user accessible.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

PAGE_SIZE = 4096
USER_TOP = 1 << 47
ADDR_TOP = 1 << 48

_MASK64 = (1 << 64) - 1


class MemoryFault(Exception):
    """Raised when a native read/write touches memory it must not touch.

    ``addr`` names the first failing byte address.  ``kind`` is "unmapped"
    when no page exists there and "perm" when a page exists but its
    permission bits forbid the access.
    """

    def __init__(self, addr: int, kind: str = "unmapped"):
        super().__init__(f"memory fault at {addr:#x} ({kind})")
        self.addr = addr
        self.kind = kind


class ManifestError(ValueError):
    """Malformed or semantically invalid image manifest."""


class MapsParseError(ValueError):
    """Unparseable line in a maps-format ground truth file."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True, slots=True)
class PagePermissions:
    """Permission bits for one page.  Writable pages are always readable."""

    readable: bool = False
    writable: bool = False
    executable: bool = False
    user_accessible: bool = False

    def __post_init__(self) -> None:
        if self.writable and not self.readable:
            raise ValueError("writable pages must be readable")

    @classmethod
    def from_rwxu(cls, spec: str) -> "PagePermissions":
        """Build from a subset of the letters 'rwxu', e.g. "rwu"."""
        seen = set()
        for ch in spec:
            if ch not in "rwxu":
                raise ValueError(f"unknown permission letter {ch!r}")
            if ch in seen:
                raise ValueError(f"duplicate permission letter {ch!r}")
            seen.add(ch)
        return cls(
            readable="r" in seen,
            writable="w" in seen,
            executable="x" in seen,
            user_accessible="u" in seen,
        )

    def as_rwxu(self) -> str:
        out = ""
        if self.readable:
            out += "r"
        if self.writable:
            out += "w"
        if self.executable:
            out += "x"
        if self.user_accessible:
            out += "u"
        return out

    def _bits(self) -> int:
        return (
            (1 if self.readable else 0)
            | (2 if self.writable else 0)
            | (4 if self.executable else 0)
            | (8 if self.user_accessible else 0)
        )


@dataclass(slots=True)
class Page:
    """One 4 KB page: permission bits plus backing bytes."""

    perms: PagePermissions
    data: bytearray

    def __post_init__(self) -> None:
        if len(self.data) != PAGE_SIZE:
            raise ValueError("page data must be exactly one page long")


class AddressSpace:
    """Sparse map of page base address to :class:`Page`."""

    def __init__(self) -> None:
        self.page_size = PAGE_SIZE
        self.pages: dict[int, Page] = {}

    @staticmethod
    def page_base(addr: int) -> int:
        return addr & ~(PAGE_SIZE - 1)

    def get_page(self, addr: int) -> Page | None:
        return self.pages.get(addr & ~(PAGE_SIZE - 1))

    def is_mapped(self, addr: int) -> bool:
        return (addr & ~(PAGE_SIZE - 1)) in self.pages

    def mapped_page_bases(self) -> list[int]:
        return sorted(self.pages)

    def map_region(
        self,
        start: int,
        length: int,
        perms: PagePermissions,
        data: bytes = b"",
    ) -> None:
        """Map ``length`` bytes at ``start``; pages beyond ``data`` are zero.

        The region must be page aligned, lie inside canonical space, not
        cross the user/kernel boundary, and not overlap existing pages.
        Kernel-half regions cannot be user accessible.
        """
        if start % PAGE_SIZE or length % PAGE_SIZE:
            raise ValueError("region bounds must be page aligned")
        if length <= 0:
            raise ValueError("region length must be positive")
        end = start + length
        if start < 0 or end > ADDR_TOP:
            raise ValueError("region outside canonical address space")
        if start < USER_TOP < end:
            raise ValueError("region crosses the user/kernel boundary")
        if start >= USER_TOP and perms.user_accessible:
            raise ValueError("kernel-half pages cannot be user accessible")
        if len(data) > length:
            raise ValueError("content blob longer than region")
        for base in range(start, end, PAGE_SIZE):
            if base in self.pages:
                raise ValueError(f"page {base:#x} already mapped")
        for base in range(start, end, PAGE_SIZE):
            off = base - start
            chunk = data[off : off + PAGE_SIZE]
            buf = bytearray(PAGE_SIZE)
            buf[: len(chunk)] = chunk
            self.pages[base] = Page(perms, buf)

    def _check_range(self, addr: int, count: int, *, write: bool) -> None:
        pos = addr
        end = addr + count
        while pos < end:
            base = pos & ~(PAGE_SIZE - 1)
            page = self.pages.get(base)
            if page is None:
                raise MemoryFault(pos, "unmapped")
            p = page.perms
            ok = p.user_accessible and (p.writable if write else p.readable)
            if not ok:
                raise MemoryFault(pos, "perm")
            pos = base + PAGE_SIZE

    def read_bytes(self, addr: int, count: int) -> bytes:
        """Native read.  Faults unless every touched page is mapped,
        readable, and user accessible."""
        if count < 0:
            raise ValueError("negative read length")
        if count == 0:
            return b""
        self._check_range(addr, count, write=False)
        out = bytearray()
        pos = addr
        end = addr + count
        while pos < end:
            base = pos & ~(PAGE_SIZE - 1)
            page = self.pages[base]
            lo = pos - base
            hi = min(PAGE_SIZE, end - base)
            out += page.data[lo:hi]
            pos = base + hi
        return bytes(out)

    def write_bytes(self, addr: int, data: bytes) -> None:
        """Native write, all or nothing: permissions for the whole range are
        checked before any byte changes."""
        if not data:
            return
        self._check_range(addr, len(data), write=True)
        pos = addr
        end = addr + len(data)
        while pos < end:
            base = pos & ~(PAGE_SIZE - 1)
            page = self.pages[base]
            lo = pos - base
            hi = min(PAGE_SIZE, end - base)
            page.data[lo:hi] = data[pos - addr : pos - addr + (hi - lo)]
            pos = base + hi

    def set_protection(self, start: int, length: int, perms: PagePermissions) -> None:
        """Replace the permissions of every page in the range.

        Unaligned or empty arguments raise ValueError; a range touching an
        unmapped page raises MemoryFault before anything changes.
        """
        if start % PAGE_SIZE or length % PAGE_SIZE or length <= 0:
            raise ValueError("arguments must be page aligned and non-empty")
        bases = range(start, start + length, PAGE_SIZE)
        for base in bases:
            if base not in self.pages:
                raise MemoryFault(base, "unmapped")
            if base >= USER_TOP and perms.user_accessible:
                raise ValueError("kernel-half pages cannot be user accessible")
        for base in bases:
            self.pages[base].perms = perms

    def content_hash(self) -> str:
        """SHA-256 over every page's base, permissions, and bytes."""
        h = hashlib.sha256()
        for base in sorted(self.pages):
            page = self.pages[base]
            h.update(base.to_bytes(8, "little"))
            h.update(bytes([page.perms._bits()]))
            h.update(page.data)
        return h.hexdigest()

    def snapshot(self) -> dict[int, bytes]:
        """Immutable copy of every page's bytes, keyed by page base."""
        return {base: bytes(p.data) for base, p in self.pages.items()}

    def shifted(self, offset: int, *, relocate_pointers: bool = False) -> "AddressSpace":
        """Deep copy with every user-half page moved up by ``offset``.

        Kernel-half pages stay in place, like the fixed hardware-dictated
        mappings real base randomization never moves.  The offset must be
        page aligned and must not push any page past the user-half top.

        With ``relocate_pointers`` the copy is also fixed up the way a
        relocating loader would patch a rebased image: every aligned 8-byte
        word whose value falls inside a page that was mapped before the
        shift is rebased by the same offset.  Random data is effectively
        never touched, since hitting the mapped span by accident requires a
        64-bit value to land in it.
        """
        if offset % PAGE_SIZE or offset < 0:
            raise ValueError("offset must be a non-negative page multiple")
        out = AddressSpace()
        for base, page in self.pages.items():
            nb = base + offset if base < USER_TOP else base
            if base < USER_TOP and nb + PAGE_SIZE > USER_TOP:
                raise ValueError("shift pushes a page past the user half")
            out.pages[nb] = Page(page.perms, bytearray(page.data))
        if relocate_pointers and offset:
            old_bases = {b for b in self.pages if b < USER_TOP}
            for page in out.pages.values():
                data = page.data
                for off in range(0, PAGE_SIZE, 8):
                    value = int.from_bytes(data[off : off + 8], "little")
                    if value & ~(PAGE_SIZE - 1) in old_bases:
                        data[off : off + 8] = (value + offset).to_bytes(8, "little")
        return out


# --- image manifests -------------------------------------------------------

def _parse_hex(value, what: str) -> int:
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        try:
            return int(value, 16)
        except ValueError:
            pass
    raise ManifestError(f"{what} is not a hex string")


def load_manifest(text: str, base_dir: str | Path | None = None) -> AddressSpace:
    """Build an address space from a JSON image manifest.

    The manifest is ``{"regions": [...]}`` where each region gives page
    aligned "start" and "len" hex strings, a "perms" string drawn from
    "rwxu", an optional "label", and optional content as either a "data"
    hex blob or a "file" path with byte "offset".  Regions without content
    are zero filled.  Unknown top-level keys are ignored so callers may
    carry side-band data in the same document.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("regions"), list):
        raise ManifestError('manifest must be an object with a "regions" list')

    space = AddressSpace()
    for i, region in enumerate(doc["regions"]):
        where = f"region {i}"
        if not isinstance(region, dict):
            raise ManifestError(f"{where}: not an object")
        start = _parse_hex(region.get("start"), f"{where} start")
        length = _parse_hex(region.get("len"), f"{where} len")
        perms_field = region.get("perms", "")
        if not isinstance(perms_field, str):
            raise ManifestError(f"{where}: perms must be a string")
        try:
            perms = PagePermissions.from_rwxu(perms_field)
        except ValueError as exc:
            raise ManifestError(f"{where}: {exc}") from None

        blob = b""
        if "data" in region:
            try:
                blob = bytes.fromhex(region["data"])
            except (TypeError, ValueError):
                raise ManifestError(f"{where}: data is not a hex blob") from None
        elif "file" in region:
            path = Path(region["file"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            offset = region.get("offset", 0)
            if not isinstance(offset, int) or offset < 0:
                raise ManifestError(f"{where}: offset must be a non-negative int")
            try:
                with open(path, "rb") as fh:
                    fh.seek(offset)
                    blob = fh.read(length)
            except OSError as exc:
                raise ManifestError(f"{where}: cannot read blob: {exc}") from None

        try:
            space.map_region(start, length, perms, blob)
        except ValueError as exc:
            raise ManifestError(f"{where}: {exc}") from None
    return space


# --- /proc/<pid>/maps ground truth -----------------------------------------

_MAPS_LINE = re.compile(
    r"^([0-9a-fA-F]+)-([0-9a-fA-F]+)\s+([r-][w-][x-][ps])\s+"
    r"([0-9a-fA-F]+)\s+(\S+)\s+(\d+)\s*(.*)$"
)


@dataclass(frozen=True, slots=True)
class MapsRegion:
    """One line of a maps-format ground truth file."""

    start: int
    end: int
    perms: PagePermissions
    shared: bool
    offset: int
    dev: str
    inode: int
    label: str

    def to_line(self) -> str:
        bits = (
            ("r" if self.perms.readable else "-")
            + ("w" if self.perms.writable else "-")
            + ("x" if self.perms.executable else "-")
            + ("s" if self.shared else "p")
        )
        line = f"{self.start:x}-{self.end:x} {bits} {self.offset:08x} {self.dev} {self.inode}"
        if self.label:
            line += f"  {self.label}"
        return line


@dataclass(frozen=True)
class GroundTruthMap:
    """Parsed maps file: sorted, non-overlapping regions."""

    regions: tuple[MapsRegion, ...]

    def to_text(self) -> str:
        return "\n".join(r.to_line() for r in self.regions) + "\n"

    def user_regions(self) -> list[MapsRegion]:
        return [r for r in self.regions if r.start < USER_TOP]

    def shifted(self, offset: int) -> "GroundTruthMap":
        """Move user-half regions up by ``offset``; kernel lines stay put."""
        if offset % PAGE_SIZE or offset < 0:
            raise ValueError("offset must be a non-negative page multiple")
        moved = []
        for r in self.regions:
            if r.start < USER_TOP:
                moved.append(
                    MapsRegion(
                        r.start + offset, r.end + offset, r.perms,
                        r.shared, r.offset, r.dev, r.inode, r.label,
                    )
                )
            else:
                moved.append(r)
        return GroundTruthMap(tuple(sorted(moved, key=lambda r: r.start)))


def parse_proc_maps(text: str) -> GroundTruthMap:
    """Parse maps-format text: ``start-end perms offset dev inode [path]``.

    Permission fields use the usual rwx letters plus p/s for private versus
    shared.  User accessibility is inferred from the address half.
    """
    regions: list[MapsRegion] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line:
            continue
        m = _MAPS_LINE.match(line)
        if m is None:
            raise MapsParseError(line_no, f"unparseable maps line: {raw!r}")
        start = int(m.group(1), 16)
        end = int(m.group(2), 16)
        if end <= start:
            raise MapsParseError(line_no, "region end precedes start")
        if start % PAGE_SIZE or end % PAGE_SIZE:
            raise MapsParseError(line_no, "region bounds not page aligned")
        field = m.group(3)
        try:
            perms = PagePermissions(
                readable=field[0] == "r",
                writable=field[1] == "w",
                executable=field[2] == "x",
                user_accessible=start < USER_TOP,
            )
        except ValueError as exc:
            raise MapsParseError(line_no, str(exc)) from None
        regions.append(
            MapsRegion(
                start=start,
                end=end,
                perms=perms,
                shared=field[3] == "s",
                offset=int(m.group(4), 16),
                dev=m.group(5),
                inode=int(m.group(6)),
                label=m.group(7).strip(),
            )
        )
    regions.sort(key=lambda r: r.start)
    for a, b in zip(regions, regions[1:]):
        if b.start < a.end:
            raise MapsParseError(0, f"regions {a.start:#x} and {b.start:#x} overlap")
    return GroundTruthMap(tuple(regions))
