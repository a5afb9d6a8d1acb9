"""Address-space exploration strategies built on the probe primitives.

Three strategies are offered: a linear page sweep, a pointer-chasing
breadth-first walk that harvests pointer-looking words from every page it
can read, and a hybrid that sweeps linearly until the first hit and then
switches to pointer chasing.  All of them classify pages purely through
probes and never read a page before a probe said it is accessible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .memspace import PAGE_SIZE, USER_TOP, AddressSpace, GroundTruthMap
from .probe import Accessibility, Prober, Writability

DEFAULT_BUDGET = 4096
DEFAULT_MAX_GAP = 64

_QWORDS_PER_PAGE = PAGE_SIZE // 8
_PAGE_UNPACK = struct.Struct(f"<{_QWORDS_PER_PAGE}Q")


@dataclass(frozen=True, slots=True)
class SeedSet:
    """The only addresses the explorer is given for free: a known return
    site inside the target's code plus the host stack pointer."""

    pointers: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.pointers:
            raise ValueError("seed set must contain at least one pointer")


@dataclass(slots=True)
class PageEntry:
    """Probe verdict for one page.  ``writable`` stays None until a write
    probe ran."""

    accessible: bool
    writable: bool | None = None

    def __post_init__(self) -> None:
        if not self.accessible and self.writable:
            raise ValueError("an inaccessible page cannot be writable")


@dataclass(slots=True)
class PageMap:
    """Accumulated probe verdicts keyed by page base address."""

    entries: dict[int, PageEntry] = field(default_factory=dict)

    def accessible_pages(self) -> list[int]:
        return sorted(b for b, e in self.entries.items() if e.accessible)

    def span(self) -> tuple[int, int] | None:
        """Page-aligned (start, end) covering all accessible pages."""
        acc = self.accessible_pages()
        if not acc:
            return None
        return acc[0], acc[-1] + PAGE_SIZE


@dataclass(frozen=True, slots=True)
class MapRun:
    start: int
    end: int
    kind: Writability


@dataclass(frozen=True, slots=True)
class ReconstructedMap:
    """Probe-derived classification of a page range, coalesced into runs of
    identical classification."""

    runs: tuple[MapRun, ...]

    def to_text(self) -> str:
        return "\n".join(f"{r.start:x}-{r.end:x} {r.kind.value}" for r in self.runs) + "\n"

    def to_json_obj(self) -> list[dict]:
        return [
            {"start": f"{r.start:#x}", "end": f"{r.end:#x}", "class": r.kind.value}
            for r in self.runs
        ]

    def to_maps_text(self) -> str:
        """Maps-format rendering of the accessible runs, for diffing against
        a ground truth file.  The executable bit is unknowable from probes
        and is left clear; inaccessible runs are omitted like unmapped
        holes."""
        lines = []
        for r in self.runs:
            if r.kind is Writability.INACCESSIBLE:
                continue
            bits = "rw-p" if r.kind is Writability.WRITABLE else "r--p"
            lines.append(f"{r.start:x}-{r.end:x} {bits} 00000000 00:00 0")
        return "\n".join(lines) + "\n"


def _check_page_range(start: int, end: int) -> None:
    if start % PAGE_SIZE or end % PAGE_SIZE:
        raise ValueError("range bounds must be page aligned")
    if not (0 <= start <= end <= USER_TOP):
        raise ValueError("range must lie inside the user half")


def scan_linear(
    space: AddressSpace, prober: Prober, start: int, end: int
) -> PageMap:
    """Tap every page in [start, end) exactly once."""
    _check_page_range(start, end)
    pm = PageMap()
    for base in range(start, end, PAGE_SIZE):
        acc = prober.tap(space, base)
        pm.entries[base] = PageEntry(acc is Accessibility.ACCESSIBLE)
    return pm


def harvest_pointers(page_bytes: bytes) -> list[int]:
    """Extract pointer candidates: aligned 8-byte words that are nonzero
    and fall inside the user half."""
    if len(page_bytes) != PAGE_SIZE:
        raise ValueError("harvest expects exactly one page of bytes")
    return [v for v in _PAGE_UNPACK.unpack(page_bytes) if 0 < v < USER_TOP]


def explore_from_pointers(
    space: AddressSpace,
    prober: Prober,
    seeds: SeedSet,
    budget: int = DEFAULT_BUDGET,
    *,
    _pagemap: PageMap | None = None,
) -> PageMap:
    """Breadth-first pointer chase from the seed addresses.

    Each dequeued page is tapped; accessible pages are read (only after the
    tap) and mined for further pointer candidates.  Inaccessible candidates
    are recorded too.  Stops after ``budget`` probed pages.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    pm = _pagemap if _pagemap is not None else PageMap()
    queue: list[int] = []
    queued: set[int] = set()
    for ptr in seeds.pointers:
        base = AddressSpace.page_base(ptr)
        if base not in queued:
            queue.append(base)
            queued.add(base)
    qi = 0
    while qi < len(queue) and len(pm.entries) < budget:
        base = queue[qi]
        qi += 1
        entry = pm.entries.get(base)
        if entry is None:
            # pages carried over from an earlier strategy keep their
            # verdict; everything else costs exactly one probe
            acc = prober.tap(space, base)
            entry = PageEntry(acc is Accessibility.ACCESSIBLE)
            pm.entries[base] = entry
        if not entry.accessible:
            continue
        data = space.read_bytes(base, PAGE_SIZE)
        for ptr in harvest_pointers(data):
            nb = AddressSpace.page_base(ptr)
            if nb not in queued:
                queue.append(nb)
                queued.add(nb)
    return pm


def _sweep(
    space: AddressSpace,
    prober: Prober,
    anchor: int,
    pm: PageMap,
    budget: int,
    max_gap: int,
    *,
    stop_on_hit: bool = False,
) -> int | None:
    """Bidirectional linear sweep from ``anchor``: walk up, then down, until
    ``max_gap`` consecutive pages in a direction were inaccessible.  Returns
    the first accessible page when ``stop_on_hit`` is set."""
    for step in (PAGE_SIZE, -PAGE_SIZE):
        base = AddressSpace.page_base(anchor)
        if step < 0:
            base += step  # upward pass already covered the anchor page
        misses = 0
        while 0 <= base < USER_TOP and misses < max_gap and len(pm.entries) < budget:
            if base not in pm.entries:
                acc = prober.tap(space, base)
                pm.entries[base] = PageEntry(acc is Accessibility.ACCESSIBLE)
            if pm.entries[base].accessible:
                if stop_on_hit:
                    return base
                misses = 0
            else:
                misses += 1
            base += step
    return None


def explore(
    space: AddressSpace,
    prober: Prober,
    mode: str,
    seeds: SeedSet,
    budget: int = DEFAULT_BUDGET,
    max_gap: int = DEFAULT_MAX_GAP,
) -> PageMap:
    """Run one exploration strategy.

    ``linear``: gap-limited bidirectional sweep around every seed.
    ``pointer-chase``: breadth-first pointer harvest from the seeds.
    ``hybrid``: sweep until the first accessible page, then hand that page
    plus the original seeds to the pointer chase.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    if mode == "pointer-chase":
        return explore_from_pointers(space, prober, seeds, budget)
    if mode == "linear":
        pm = PageMap()
        for anchor in seeds.pointers:
            _sweep(space, prober, anchor, pm, budget, max_gap)
        return pm
    if mode == "hybrid":
        pm = PageMap()
        hit = None
        for anchor in seeds.pointers:
            hit = _sweep(space, prober, anchor, pm, budget, max_gap, stop_on_hit=True)
            if hit is not None:
                break
        if hit is None:
            return pm
        chase_seeds = SeedSet((hit, *seeds.pointers))
        return explore_from_pointers(space, prober, chase_seeds, budget, _pagemap=pm)
    raise ValueError(f"unknown exploration mode {mode!r}")


def region_around(
    space: AddressSpace, prober: Prober, addr: int, max_pages: int = 1024
) -> tuple[int, int]:
    """Extent of the contiguous accessible run containing ``addr``.

    Probes outward in both directions until the first inaccessible page.
    The page holding ``addr`` itself must be accessible.
    """
    base = AddressSpace.page_base(addr)
    if prober.tap(space, base) is not Accessibility.ACCESSIBLE:
        raise ValueError(f"page {base:#x} is not accessible")
    lo = base
    for _ in range(max_pages):
        nxt = lo - PAGE_SIZE
        if nxt < 0 or prober.tap(space, nxt) is not Accessibility.ACCESSIBLE:
            break
        lo = nxt
    hi = base + PAGE_SIZE
    for _ in range(max_pages):
        if hi >= USER_TOP or prober.tap(space, hi) is not Accessibility.ACCESSIBLE:
            break
        hi += PAGE_SIZE
    return lo, hi


def reconstruct_map(
    space: AddressSpace, prober: Prober, start: int, end: int
) -> ReconstructedMap:
    """Classify every page in [start, end) via write probes and coalesce
    adjacent pages of equal classification into runs."""
    _check_page_range(start, end)
    runs: list[MapRun] = []
    cur_kind: Writability | None = None
    cur_start = start
    for base in range(start, end, PAGE_SIZE):
        kind = prober.claw(space, base)
        if kind is not cur_kind:
            if cur_kind is not None:
                runs.append(MapRun(cur_start, base, cur_kind))
            cur_kind = kind
            cur_start = base
    if cur_kind is not None:
        runs.append(MapRun(cur_start, end, cur_kind))
    return ReconstructedMap(tuple(runs))


def truth_runs(truth: GroundTruthMap, start: int, end: int) -> tuple[MapRun, ...]:
    """Classification runs a perfect observer would produce for [start, end),
    derived straight from ground-truth region permissions."""
    _check_page_range(start, end)
    marks: list[MapRun] = []

    def push(lo: int, hi: int, kind: Writability) -> None:
        if lo >= hi:
            return
        if marks and marks[-1].kind is kind and marks[-1].end == lo:
            marks[-1] = MapRun(marks[-1].start, hi, kind)
        else:
            marks.append(MapRun(lo, hi, kind))

    pos = start
    for r in truth.user_regions():
        lo = max(r.start, start)
        hi = min(r.end, end)
        if hi <= lo:
            continue
        push(pos, lo, Writability.INACCESSIBLE)
        if r.perms.writable:
            kind = Writability.WRITABLE
        elif r.perms.readable:
            kind = Writability.READ_ONLY
        else:
            kind = Writability.INACCESSIBLE
        push(lo, hi, kind)
        pos = hi
    push(pos, end, Writability.INACCESSIBLE)
    return tuple(marks)


def match_ground_truth(
    recon: ReconstructedMap, truth: GroundTruthMap
) -> tuple[bool, list[str]]:
    """Compare a reconstruction against ground truth over its own range.

    Returns (matched, mismatch descriptions).  Only the user half is
    compared; kernel regions are invisible to probes by design.
    """
    if not recon.runs:
        return True, []
    start = recon.runs[0].start
    end = recon.runs[-1].end
    expected = truth_runs(truth, start, end)
    if expected == recon.runs:
        return True, []
    mismatches = []
    got = {(r.start, r.end): r.kind for r in recon.runs}
    want = {(r.start, r.end): r.kind for r in expected}
    for key in sorted(set(got) | set(want)):
        g = got.get(key)
        w = want.get(key)
        if g != w:
            lo, hi = key
            mismatches.append(
                f"{lo:#x}-{hi:#x}: probed "
                f"{g.value if g else 'missing'}, truth "
                f"{w.value if w else 'missing'}"
            )
    return False, mismatches


def egg_hunt(
    space: AddressSpace,
    prober: Prober,
    tag: bytes,
    start: int,
    end: int,
) -> int | None:
    """Find the lowest address of ``tag`` in [start, end) using only probes
    plus reads of pages already probed accessible.

    Matches may straddle two adjacent accessible pages.  Inaccessible pages
    are skipped without faulting.  Returns None when the tag is absent.
    """
    if not (4 <= len(tag) <= 32):
        raise ValueError("tag length must be between 4 and 32 bytes")
    _check_page_range(start, end)
    overlap = len(tag) - 1
    acc_cache: dict[int, bool] = {}

    def accessible(base: int) -> bool:
        if base not in acc_cache:
            acc_cache[base] = (
                prober.tap(space, base) is Accessibility.ACCESSIBLE
            )
        return acc_cache[base]

    for base in range(start, end, PAGE_SIZE):
        if not accessible(base):
            continue
        buf = space.read_bytes(base, PAGE_SIZE)
        nxt = base + PAGE_SIZE
        if overlap and nxt < end and accessible(nxt):
            buf += space.read_bytes(nxt, overlap)
        hit = buf.find(tag)
        if hit != -1:
            # the buffer extends only len(tag)-1 bytes past the page, so any
            # match found here necessarily starts inside this page
            return base + hit
    return None
