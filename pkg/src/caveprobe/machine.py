"""Minimal x86-64 machine model used to verify injected control flow.

Only the handful of instructions the pivot, chain, and payload need are
implemented; everything else traps loudly rather than guessing.  Memory
accesses go through the address space's permission checks, so a store to a
read-only page traps exactly like the real MMU would fault it.

Supported encodings (little endian, REX.W = 0x48 where shown):

    58+rd            pop r64
    50+rd            push r64
    C3               ret
    C9               leave            (rsp <- rbp; rbp <- pop)
    0F 05            syscall
    90               nop
    48 B8+rd imm64   mov r64, imm64
    48 89 /r         mov r/m64, r64   (mod 00 and 11 only; no SIB, no disp)
    48 8B /r         mov r64, r/m64   (mod 00 and 11 only; no SIB, no disp)
    FF /4 (mod 11)   jmp r64

There are no flags and no arithmetic; the verification runs need none.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .memspace import (
    PAGE_SIZE,
    USER_TOP,
    AddressSpace,
    MemoryFault,
    PagePermissions,
)

MASK64 = (1 << 64) - 1

REG_NAMES = (
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)
_REG_INDEX = {name: i for i, name in enumerate(REG_NAMES)}

RUNNING = "running"
EXITED = "exited"
TRAPPED = "trapped"

# Linux x86-64 ABI values used by the syscall model.
SYS_WRITE = 1
SYS_MPROTECT = 10
SYS_EXIT = 60

PROT_READ = 1
PROT_WRITE = 2
PROT_EXEC = 4
PROT_RWX = PROT_READ | PROT_WRITE | PROT_EXEC

EINVAL = 22
ENOMEM = 12
EFAULT = 14

MAX_INSN_LEN = 10

# assemble_payload refuses to unroll zero stores past this many bytes
MAX_CLEANUP_BYTES = 1 << 16


@dataclass(slots=True)
class MachineState:
    """Register file plus run status.  ``flags`` exists only as a
    placeholder; nothing sets or reads it."""

    regs: dict[str, int] = field(
        default_factory=lambda: {name: 0 for name in REG_NAMES}
    )
    rip: int = 0
    flags: int = 0
    status: str = RUNNING
    exit_code: int | None = None
    trap_reason: str | None = None

    def reg(self, name: str) -> int:
        return self.regs[name]

    def set_reg(self, name: str, value: int) -> None:
        self.regs[name] = value & MASK64


@dataclass(frozen=True, slots=True)
class SyscallEffect:
    number: int
    name: str
    args: tuple[int, int, int]
    ret: int


@dataclass(frozen=True, slots=True)
class StoreEffect:
    addr: int
    value: int
    width: int = 8


@dataclass(frozen=True, slots=True)
class RunResult:
    final_state: MachineState
    steps: int
    side_effects: tuple[object, ...]
    stop_reason: str  # "reached-stop" | "halted" | "budget-exhausted"


class _Stop(Exception):
    """Internal: unwinds instruction execution into a trap."""

    def __init__(self, reason: str):
        self.reason = reason


def _fetch_u8(space: AddressSpace, addr: int) -> int:
    page = space.get_page(addr)
    if page is None:
        raise _Stop("unmapped")
    p = page.perms
    if not (addr < USER_TOP and p.executable and p.user_accessible):
        raise _Stop("nx-fetch")
    return page.data[addr % PAGE_SIZE]


def _read64(space: AddressSpace, addr: int) -> int:
    try:
        return int.from_bytes(space.read_bytes(addr, 8), "little")
    except MemoryFault as exc:
        raise _Stop("unmapped" if exc.kind == "unmapped" else "perm-read") from None


def _write64(space: AddressSpace, addr: int, value: int,
             effects: list | None) -> None:
    try:
        space.write_bytes(addr, (value & MASK64).to_bytes(8, "little"))
    except MemoryFault as exc:
        raise _Stop("unmapped" if exc.kind == "unmapped" else "perm-write") from None
    if effects is not None:
        effects.append(StoreEffect(addr, value & MASK64))


# --- syscall model ----------------------------------------------------------

def _sys_mprotect(state: MachineState, space: AddressSpace) -> int:
    addr = state.reg("rdi")
    length = state.reg("rsi")
    prot = state.reg("rdx")
    if addr % PAGE_SIZE or prot & ~(PROT_READ | PROT_WRITE | PROT_EXEC):
        return -EINVAL
    if addr >= USER_TOP:
        return -ENOMEM
    # the kernel rounds the length up to whole pages; zero is a no-op
    length = (length + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE
    if length == 0:
        return 0
    perms = PagePermissions(
        # hardware cannot express write-only mappings, so PROT_WRITE
        # implies readability here just as it does on x86
        readable=bool(prot & (PROT_READ | PROT_WRITE)),
        writable=bool(prot & PROT_WRITE),
        executable=bool(prot & PROT_EXEC),
        user_accessible=True,
    )
    try:
        space.set_protection(addr, length, perms)
    except MemoryFault:
        return -ENOMEM
    except ValueError:
        return -EINVAL
    return 0


def _sys_write(state: MachineState, space: AddressSpace) -> int:
    buf = state.reg("rsi")
    count = state.reg("rdx")
    if count > (1 << 20):  # simulator cap, not a kernel behavior
        return -EFAULT
    try:
        space.read_bytes(buf, count)
    except (MemoryFault, ValueError):
        return -EFAULT
    return count


def _sys_exit(state: MachineState, space: AddressSpace) -> int:
    state.status = EXITED
    state.exit_code = state.reg("rdi")
    return 0


class SyscallModel:
    """Dispatch table from syscall number to handler.  Unknown numbers trap."""

    def __init__(self) -> None:
        self.table = {
            SYS_WRITE: ("write", _sys_write),
            SYS_MPROTECT: ("mprotect", _sys_mprotect),
            SYS_EXIT: ("exit", _sys_exit),
        }

    def dispatch(self, state: MachineState, space: AddressSpace,
                 effects: list | None) -> None:
        number = state.reg("rax")
        entry = self.table.get(number)
        if entry is None:
            raise _Stop("unknown-syscall")
        name, handler = entry
        args = (state.reg("rdi"), state.reg("rsi"), state.reg("rdx"))
        ret = handler(state, space)
        state.set_reg("rax", ret & MASK64)
        if effects is not None:
            effects.append(SyscallEffect(number, name, args, ret))


DEFAULT_SYSCALLS = SyscallModel()


# --- instruction stepping ---------------------------------------------------

def step(
    state: MachineState,
    space: AddressSpace,
    effects: list | None = None,
    syscalls: SyscallModel = DEFAULT_SYSCALLS,
) -> MachineState:
    """Execute one instruction at ``state.rip``, mutating ``state``.

    Undecodable bytes, fetches from non-executable memory, stores to
    read-only pages, and touches of unmapped pages all end in a trapped
    status instead of an exception.
    """
    if state.status != RUNNING:
        raise ValueError("machine is not running")
    try:
        _execute(state, space, effects, syscalls)
    except _Stop as stop:
        state.status = TRAPPED
        state.trap_reason = stop.reason
    return state


def _execute(
    state: MachineState,
    space: AddressSpace,
    effects: list | None,
    syscalls: SyscallModel,
) -> None:
    rip = state.rip
    pos = rip

    def u8() -> int:
        nonlocal pos
        b = _fetch_u8(space, pos)
        pos += 1
        return b

    def pop64() -> int:
        rsp = state.reg("rsp")
        value = _read64(space, rsp)
        state.set_reg("rsp", rsp + 8)
        return value

    b0 = u8()

    if b0 == 0x90:  # nop
        state.rip = pos
        return
    if b0 == 0xC3:  # ret
        state.rip = pop64()
        return
    if b0 == 0xC9:  # leave
        state.set_reg("rsp", state.reg("rbp"))
        state.set_reg("rbp", pop64())
        state.rip = pos
        return
    if b0 == 0x0F:
        if u8() != 0x05:
            raise _Stop("undecodable")
        state.rip = pos  # rip already past the instruction when it runs
        syscalls.dispatch(state, space, effects)
        return
    if 0x50 <= b0 <= 0x57:  # push r64
        rsp = (state.reg("rsp") - 8) & MASK64
        _write64(space, rsp, state.reg(REG_NAMES[b0 - 0x50]), effects)
        state.set_reg("rsp", rsp)
        state.rip = pos
        return
    if 0x58 <= b0 <= 0x5F:  # pop r64
        state.set_reg(REG_NAMES[b0 - 0x58], pop64())
        state.rip = pos
        return
    if b0 == 0x48:  # REX.W
        b1 = u8()
        if 0xB8 <= b1 <= 0xBF:  # mov r64, imm64
            imm = 0
            for shift in range(0, 64, 8):
                imm |= u8() << shift
            state.set_reg(REG_NAMES[b1 - 0xB8], imm)
            state.rip = pos
            return
        if b1 in (0x89, 0x8B):
            modrm = u8()
            mod = modrm >> 6
            reg = REG_NAMES[(modrm >> 3) & 7]
            rm_i = modrm & 7
            if mod == 0b11:
                rm = REG_NAMES[rm_i]
                if b1 == 0x89:
                    state.set_reg(rm, state.reg(reg))
                else:
                    state.set_reg(reg, state.reg(rm))
                state.rip = pos
                return
            if mod == 0b00 and rm_i not in (4, 5):  # 4 needs SIB, 5 is rip-rel
                addr = state.reg(REG_NAMES[rm_i])
                if b1 == 0x89:
                    _write64(space, addr, state.reg(reg), effects)
                else:
                    state.set_reg(reg, _read64(space, addr))
                state.rip = pos
                return
            raise _Stop("undecodable")
        raise _Stop("undecodable")
    if b0 == 0xFF:  # jmp r64
        modrm = u8()
        if modrm >> 6 == 0b11 and (modrm >> 3) & 7 == 4:
            state.rip = state.reg(REG_NAMES[modrm & 7])
            return
        raise _Stop("undecodable")
    raise _Stop("undecodable")


def run_until(
    state: MachineState,
    space: AddressSpace,
    stop_rip: int,
    max_steps: int = 100_000,
    syscalls: SyscallModel = DEFAULT_SYSCALLS,
) -> RunResult:
    """Step until rip reaches ``stop_rip`` (checked before executing there),
    the machine halts, or the step budget runs out."""
    effects: list = []
    steps = 0
    while True:
        if state.status != RUNNING:
            reason = "halted"
            break
        if state.rip == stop_rip:
            reason = "reached-stop"
            break
        if steps >= max_steps:
            reason = "budget-exhausted"
            break
        step(state, space, effects, syscalls)
        steps += 1
    return RunResult(state, steps, tuple(effects), reason)


# --- tiny assembler ---------------------------------------------------------

def enc_mov_ri(reg: str, imm: int) -> bytes:
    """mov r64, imm64 (register must be one of rax..rdi)."""
    idx = _REG_INDEX[reg]
    if idx > 7:
        raise ValueError("immediate moves support only rax..rdi here")
    return bytes([0x48, 0xB8 + idx]) + (imm & MASK64).to_bytes(8, "little")


def enc_store(addr_reg: str, src_reg: str) -> bytes:
    """mov [addr_reg], src_reg."""
    ai = _REG_INDEX[addr_reg]
    si = _REG_INDEX[src_reg]
    if ai in (4, 5) or ai > 7 or si > 7:
        raise ValueError("store needs plain registers, address not rsp/rbp")
    return bytes([0x48, 0x89, (si << 3) | ai])


def enc_jmp_r(reg: str) -> bytes:
    idx = _REG_INDEX[reg]
    if idx > 7:
        raise ValueError("jmp register must be one of rax..rdi")
    return bytes([0xFF, 0xC0 | (4 << 3) | idx])


def enc_nop() -> bytes:
    return b"\x90"


# length of the marker-writing prologue that assemble_payload emits,
# nop-padded so the cleanup region stays 8-byte divisible
MARKER_STUB_LEN = 24


def assemble_payload(
    record,
    cleanup_ranges: list[tuple[int, int]],
    marker: tuple[int, int],
) -> bytes:
    """Emit position-independent bytes (from the supported subset only) that:

    1. write the marker value to the marker address,
    2. zero every cleanup range with unrolled 8-byte stores,
    3. load the stack and base pointers from the restoration record,
    4. jump to the recorded resume address.

    ``record`` must expose resume_rip/resume_rsp/resume_rbp.  Ranges must be
    8-byte divisible and together no larger than MAX_CLEANUP_BYTES, since
    each zeroed 8 bytes costs 13 instruction bytes.
    """
    marker_addr, marker_value = marker
    total = 0
    for start, length in cleanup_ranges:
        if length < 0 or length % 8:
            raise ValueError("cleanup ranges must be 8-byte divisible")
        total += length
    if total > MAX_CLEANUP_BYTES:
        raise ValueError(
            f"cleanup of {total:#x} bytes exceeds the "
            f"{MAX_CLEANUP_BYTES:#x}-byte unrolled-store limit"
        )

    out = bytearray()
    out += enc_mov_ri("rdi", marker_addr)
    out += enc_mov_ri("rsi", marker_value)
    out += enc_store("rdi", "rsi")
    out += enc_nop()
    assert len(out) == MARKER_STUB_LEN

    out += enc_mov_ri("rsi", 0)
    for start, length in cleanup_ranges:
        for off in range(0, length, 8):
            out += enc_mov_ri("rdi", start + off)
            out += enc_store("rdi", "rsi")

    out += enc_mov_ri("rsp", record.resume_rsp)
    out += enc_mov_ri("rbp", record.resume_rbp)
    out += enc_mov_ri("rcx", record.resume_rip)
    out += enc_jmp_r("rcx")
    return bytes(out)
