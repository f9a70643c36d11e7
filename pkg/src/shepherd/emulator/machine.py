"""Interpreter for the x86-32 subset over a sparse paged address space.

Only ZF/SF/CF/OF are modelled.  A fetch, read or write to an unmapped page,
a write to a read-only page, an instruction outside the subset, or a
parity-flag branch halts the machine with cause ``fault``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

from ..pe import PeImage
from ..x86 import (
    ESP,
    DecodeError,
    Imm,
    Instruction,
    Mem,
    Mnemonic,
    Reg,
    Rel,
    decode,
)

MASK = 0xFFFFFFFF
PAGE = 0x1000
DEFAULT_STEP_LIMIT = 10_000_000

# EFLAGS bit positions of the modelled flags; bit 1 always reads as one
FLAG_BITS = {"cf": 0, "zf": 6, "sf": 7, "of": 11}


class HaltCause(Enum):
    NORMAL_EXIT = "normal_exit"
    POLICY_HALT = "policy_halt"
    FAULT = "fault"
    STEP_LIMIT = "step_limit"


class Fault(Exception):
    pass


class MapCollision(Exception):
    pass


@dataclass
class Region:
    base: int
    size: int
    name: str

    def contains(self, address: int) -> bool:
        return self.base <= address < self.base + self.size


class Memory:
    def __init__(self):
        self.pages: dict[int, bytearray] = {}
        self.perms: dict[int, str] = {}
        self.regions: list[Region] = []
        self._region_cache: dict[int, tuple[int, int] | None] = {}

    def add_region(self, region: Region) -> Region:
        self.regions.append(region)
        self._region_cache.clear()
        return region

    def map(self, base: int, size: int, perms: str, name: str = "", data: bytes = b"") -> Region:
        if base % PAGE:
            raise MapCollision(f"base {base:#x} is not page aligned")
        first, count = base // PAGE, max(1, -(-size // PAGE))
        for page in range(first, first + count):
            if page in self.pages:
                raise MapCollision(f"page {page * PAGE:#x} already mapped")
        for page in range(first, first + count):
            self.pages[page] = bytearray(PAGE)
            self.perms[page] = perms
        region = self.add_region(Region(base, count * PAGE, name))
        if data:
            self.poke(base, data)
        return region

    def protect(self, base: int, size: int, perms: str) -> None:
        for page in range(base // PAGE, (base + size - 1) // PAGE + 1):
            if page not in self.pages:
                raise Fault(f"protect of unmapped page {page * PAGE:#x}")
            self.perms[page] = perms

    def region_of(self, address: int) -> tuple[int, int] | None:
        """(region index, offset) of ``address``; load-base independent."""
        page = address // PAGE
        try:
            hit = self._region_cache[page]
        except KeyError:
            hit = next(((i, r.base) for i, r in enumerate(self.regions) if r.contains(address)), None)
            self._region_cache[page] = hit
        return None if hit is None else (hit[0], address - hit[1])

    def executable(self, address: int) -> bool:
        return "x" in self.perms.get((address & MASK) // PAGE, "")

    def read(self, address: int, size: int) -> bytes:
        address &= MASK
        out = bytearray()
        while size:
            page, off = divmod(address, PAGE)
            data = self.pages.get(page)
            if data is None:
                raise Fault(f"read of unmapped address {address:#010x}")
            chunk = min(size, PAGE - off)
            out += data[off : off + chunk]
            address = (address + chunk) & MASK
            size -= chunk
        return bytes(out)

    def poke(self, address: int, data: bytes) -> list[int]:
        """Write ignoring page permissions; returns the touched pages."""
        address &= MASK
        touched = []
        pos = 0
        while pos < len(data):
            page, off = divmod(address, PAGE)
            target = self.pages.get(page)
            if target is None:
                raise Fault(f"write to unmapped address {address:#010x}")
            chunk = min(len(data) - pos, PAGE - off)
            target[off : off + chunk] = data[pos : pos + chunk]
            touched.append(page)
            address = (address + chunk) & MASK
            pos += chunk
        return touched

    def check_writable(self, address: int, size: int) -> None:
        for page in {(address & MASK) // PAGE, ((address + size - 1) & MASK) // PAGE}:
            perms = self.perms.get(page)
            if perms is None:
                raise Fault(f"write to unmapped address {address & MASK:#010x}")
            if "w" not in perms:
                raise Fault(f"write to read-only address {address & MASK:#010x}")

    def read_u32(self, address: int) -> int:
        return struct.unpack("<I", self.read(address, 4))[0]


@dataclass
class MachineState:
    gpr: list[int] = field(default_factory=lambda: [0] * 8)
    flags: dict[str, int] = field(default_factory=lambda: dict.fromkeys(FLAG_BITS, 0))
    eip: int = 0
    memory: Memory = field(default_factory=Memory)
    halted: bool = False
    halt_cause: HaltCause | None = None
    fault_reason: str = ""
    steps: int = 0

    def eflags(self) -> int:
        value = 2
        for name, bit in FLAG_BITS.items():
            value |= self.flags[name] << bit
        return value

    def set_eflags(self, value: int) -> None:
        for name, bit in FLAG_BITS.items():
            self.flags[name] = (value >> bit) & 1


def load_image(image: PeImage, base: int, state: MachineState, name: str = "") -> Region:
    """Map ``image`` at ``base`` with section permissions and apply HIGHLOW
    relocations for the delta from its preferred base."""
    if base % PAGE:
        raise MapCollision(f"base {base:#x} is not page aligned")
    size = max(image.size_of_image, max(s.rva + s.virtual_size for s in image.sections))
    mem = state.memory
    region_pages = range(base // PAGE, -(-(base + size) // PAGE))
    if any(p in mem.pages for p in region_pages):
        raise MapCollision(f"image at {base:#x} overlaps mapped memory")
    for page in region_pages:
        mem.pages[page] = bytearray(PAGE)
        mem.perms[page] = ""
    mem.poke(base, bytes(image.header_blob[: image.size_of_headers]))
    mem.perms[base // PAGE] = "r"
    for sec in image.sections:
        mem.poke(base + sec.rva, sec.mapped_bytes())
        perms = "r" + ("w" if sec.writable else "") + ("x" if sec.executable else "")
        for page in range((base + sec.rva) // PAGE, (base + sec.rva + max(sec.virtual_size, 1) - 1) // PAGE + 1):
            old = mem.perms[page]
            mem.perms[page] = "".join(c for c in "rwx" if c in old or c in perms)
    delta = (base - image.image_base) & MASK
    if delta:
        for rel in image.relocations:
            at = base + rel.rva
            mem.poke(at, struct.pack("<I", (mem.read_u32(at) + delta) & MASK))
    return mem.add_region(Region(base, len(region_pages) * PAGE, name or "image"))


class Machine:
    """Executes instructions on a MachineState.

    ``hooks`` maps an address to a callable run instead of the instruction
    there; the filter routine the rewritten code calls is attached this way.
    """

    def __init__(self, state: MachineState, exit_address: int | None = None):
        self.state = state
        self.exit_address = exit_address
        self.hooks: dict[int, object] = {}
        self._cache: dict[int, dict[int, Instruction]] = {}
        self._trace = hashlib.sha256()
        self.writes: list[tuple[int, int, int]] = []  # (step, address, value) outside ignored ranges
        self.ignore_writes: list[tuple[int, int]] = []
        self.trace_lines: list[str] | None = None
        # (lo, hi) address range whose first execution step is recorded
        self.watch: tuple[int, int] | None = None
        self.watch_hit: int | None = None

    # -- helpers -----------------------------------------------------------

    @property
    def trace_hash(self) -> str:
        return self._trace.hexdigest()

    def halt(self, cause: HaltCause, reason: str = "") -> None:
        self.state.halted = True
        self.state.halt_cause = cause
        self.state.fault_reason = reason

    def fetch(self, eip: int) -> Instruction:
        page = eip // PAGE
        cached = self._cache.get(page, {}).get(eip)
        if cached is not None:
            return cached
        mem = self.state.memory
        if not mem.executable(eip):
            raise Fault(f"fetch from non-executable address {eip:#010x}")
        window = bytearray()
        addr = eip
        while len(window) < 15 and mem.executable(addr):
            take = min(15 - len(window), PAGE - addr % PAGE)
            window += mem.read(addr, take)
            addr = (addr + take) & MASK
        try:
            insn = decode(window, eip)
        except DecodeError as exc:
            raise Fault(f"cannot decode at {eip:#010x}: {exc}") from None
        self._cache.setdefault(page, {})[eip] = insn
        return insn

    def _ea(self, mem: Mem) -> int:
        gpr = self.state.gpr
        addr = mem.disp
        if mem.base is not None:
            addr += gpr[mem.base]
        if mem.index is not None:
            addr += gpr[mem.index] * mem.scale
        return addr & MASK

    def read_operand(self, op) -> int:
        if isinstance(op, Reg):
            return self.state.gpr[op.num]
        if isinstance(op, Imm):
            return op.signed & MASK
        if isinstance(op, Mem):
            return self.state.memory.read_u32(self._ea(op))
        raise Fault(f"cannot read operand {op!r}")

    def store(self, address: int, value: int) -> None:
        mem = self.state.memory
        mem.check_writable(address, 4)
        for page in mem.poke(address, struct.pack("<I", value & MASK)):
            if "x" in mem.perms[page]:
                self._cache.pop(page, None)
                self._cache.pop(page - 1, None)
        if not any(lo <= address < hi for lo, hi in self.ignore_writes):
            self.writes.append((self.state.steps, address & MASK, value & MASK))

    def write_operand(self, op, value: int) -> None:
        if isinstance(op, Reg):
            self.state.gpr[op.num] = value & MASK
        elif isinstance(op, Mem):
            self.store(self._ea(op), value)
        else:
            raise Fault(f"cannot write operand {op!r}")

    def push(self, value: int) -> None:
        gpr = self.state.gpr
        gpr[ESP] = (gpr[ESP] - 4) & MASK
        self.store(gpr[ESP], value)

    def pop(self) -> int:
        gpr = self.state.gpr
        value = self.state.memory.read_u32(gpr[ESP])
        gpr[ESP] = (gpr[ESP] + 4) & MASK
        return value

    def _result_flags(self, r: int) -> None:
        f = self.state.flags
        f["zf"] = int(r == 0)
        f["sf"] = r >> 31

    def alu(self, mnemonic: Mnemonic, a: int, b: int) -> int:
        f = self.state.flags
        if mnemonic is Mnemonic.ADD:
            full = a + b
            r = full & MASK
            f["cf"] = full >> 32
            f["of"] = (((a ^ r) & (b ^ r)) >> 31) & 1
        elif mnemonic in (Mnemonic.SUB, Mnemonic.CMP):
            r = (a - b) & MASK
            f["cf"] = int(a < b)
            f["of"] = (((a ^ b) & (a ^ r)) >> 31) & 1
        else:
            if mnemonic is Mnemonic.AND or mnemonic is Mnemonic.TEST:
                r = a & b
            elif mnemonic is Mnemonic.OR:
                r = a | b
            elif mnemonic is Mnemonic.XOR:
                r = a ^ b
            else:
                raise Fault(f"not an ALU mnemonic: {mnemonic}")
            f["cf"] = f["of"] = 0
        self._result_flags(r)
        return r

    def condition(self, cond: int) -> bool:
        f = self.state.flags
        base = cond >> 1
        if base == 0:
            value = f["of"]
        elif base == 1:
            value = f["cf"]
        elif base == 2:
            value = f["zf"]
        elif base == 3:
            value = f["cf"] | f["zf"]
        elif base == 4:
            value = f["sf"]
        elif base == 5:
            raise Fault("parity flag is not modelled")
        elif base == 6:
            value = f["sf"] ^ f["of"]
        else:
            value = (f["sf"] ^ f["of"]) | f["zf"]
        return bool(value) != bool(cond & 1)

    # -- execution ---------------------------------------------------------

    def step(self) -> None:
        st = self.state
        if st.halted:
            return
        eip = st.eip
        if self.watch is not None and self.watch_hit is None and self.watch[0] <= eip < self.watch[1]:
            self.watch_hit = st.steps
        hook = self.hooks.get(eip)
        if hook is not None:
            st.steps += 1
            self._note(eip, "hook")
            hook(self)
            return
        try:
            insn = self.fetch(eip)
            self._note(eip, insn.mnemonic.value, insn)
            st.steps += 1
            self.execute(insn)
        except Fault as exc:
            self.halt(HaltCause.FAULT, str(exc))

    def _note(self, eip: int, name: str, insn: Instruction | None = None) -> None:
        where = self.state.memory.region_of(eip) or (-1, eip)
        self._trace.update(struct.pack("<iI", *where) + name.encode())
        if self.trace_lines is not None:
            raw = self.state.memory.read(eip, insn.length).hex() if insn else ""
            self.trace_lines.append(f"{self.state.steps} {eip:#010x} {raw} {insn if insn else name}")

    def execute(self, insn: Instruction) -> None:
        st = self.state
        gpr = st.gpr
        mn = insn.mnemonic
        ops = insn.operands
        nxt = (insn.rva + insn.length) & MASK
        st.eip = nxt
        if mn is Mnemonic.MOV:
            self.write_operand(ops[0], self.read_operand(ops[1]))
        elif mn is Mnemonic.LEA:
            gpr[ops[0].num] = self._ea(ops[1])
        elif mn in (Mnemonic.ADD, Mnemonic.SUB, Mnemonic.AND, Mnemonic.OR, Mnemonic.XOR):
            self.write_operand(ops[0], self.alu(mn, self.read_operand(ops[0]), self.read_operand(ops[1])))
        elif mn in (Mnemonic.CMP, Mnemonic.TEST):
            self.alu(mn, self.read_operand(ops[0]), self.read_operand(ops[1]))
        elif mn in (Mnemonic.INC, Mnemonic.DEC):
            a = self.read_operand(ops[0])
            r = (a + 1 if mn is Mnemonic.INC else a - 1) & MASK
            st.flags["of"] = int(a == (0x7FFFFFFF if mn is Mnemonic.INC else 0x80000000))
            self._result_flags(r)
            self.write_operand(ops[0], r)
        elif mn is Mnemonic.PUSH:
            self.push(self.read_operand(ops[0]))
        elif mn is Mnemonic.POP:
            value = self.pop()
            if isinstance(ops[0], Mem):
                # the address is computed after ESP has been incremented
                self.write_operand(ops[0], value)
            else:
                gpr[ops[0].num] = value
        elif mn is Mnemonic.PUSHFD:
            self.push(st.eflags())
        elif mn is Mnemonic.POPFD:
            st.set_eflags(self.pop())
        elif mn is Mnemonic.NOP:
            pass
        elif mn is Mnemonic.INT3:
            if insn.rva == self.exit_address:
                self.halt(HaltCause.NORMAL_EXIT)
            else:
                raise Fault(f"breakpoint at {insn.rva:#010x}")
        elif mn is Mnemonic.CALL:
            target = self._transfer_target(insn)
            self.push(nxt)
            st.eip = target
        elif mn is Mnemonic.JMP:
            st.eip = self._transfer_target(insn)
        elif mn is Mnemonic.JCC:
            if self.condition(insn.cond):
                st.eip = insn.target & MASK
        elif mn is Mnemonic.RET:
            target = self.pop()
            if ops:
                gpr[ESP] = (gpr[ESP] + ops[0].value) & MASK
            st.eip = target
        else:
            raise Fault(f"no semantics for {mn}")

    def _transfer_target(self, insn: Instruction) -> int:
        op = insn.operands[0]
        if isinstance(op, Rel):
            return insn.target & MASK
        return self.read_operand(op)

    def run(self, max_steps: int = DEFAULT_STEP_LIMIT) -> MachineState:
        st = self.state
        while not st.halted:
            if st.steps >= max_steps:
                self.halt(HaltCause.STEP_LIMIT)
                break
            self.step()
        return st
